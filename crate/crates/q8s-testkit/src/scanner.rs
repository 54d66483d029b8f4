//! Regex-based reference import scanner.
//!
//! Implements the same contract as the production analyzer with different
//! machinery: regular expressions over comment-stripped, semicolon-split
//! top-level lines. Shares only the pinned data files (the standard-library
//! list and the module-to-package table), which are part of the contract.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::OnceLock;

use regex::Regex;

const STDLIB_MODULES: &str = include_str!("../../q8s-core/data/python_stdlib_modules.txt");
const MODULE_PACKAGES: &str = include_str!("../../q8s-core/data/module_packages.map");

fn stdlib() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STDLIB_MODULES
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

fn package_map() -> &'static HashMap<&'static str, &'static str> {
    static MAP: OnceLock<HashMap<&'static str, &'static str>> = OnceLock::new();
    MAP.get_or_init(|| {
        MODULE_PACKAGES
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .filter_map(|l| l.split_once('='))
            .map(|(m, p)| (m.trim(), p.trim()))
            .collect()
    })
}

struct Patterns {
    import_stmt: Regex,
    from_stmt: Regex,
    definition: Regex,
    assignment: Regex,
    identifier: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        import_stmt: Regex::new(r"^import\s+(.+)$").unwrap(),
        from_stmt: Regex::new(r"^from\s+([A-Za-z_][\w.]*)\s+import\s").unwrap(),
        definition: Regex::new(r"^(?:async\s+def|def|class)\s+([A-Za-z_]\w*)").unwrap(),
        assignment: Regex::new(r"^([A-Za-z_]\w*)\s*(?::[^=]+)?=[^=]").unwrap(),
        identifier: Regex::new(r"^[A-Za-z_]\w*$").unwrap(),
    })
}

fn top_level_statements(text: &str) -> Vec<&str> {
    let mut statements = Vec::new();
    for line in text.lines() {
        if line.starts_with(char::is_whitespace) {
            continue;
        }
        let code = line.split('#').next().unwrap_or("");
        statements.extend(code.split(';').map(str::trim).filter(|s| !s.is_empty()));
    }
    statements
}

/// Scans one cell and returns the sorted, deduplicated package list.
pub fn scan(cell_text: &str) -> Vec<String> {
    let p = patterns();
    let statements = top_level_statements(cell_text);

    let mut locals: HashSet<&str> = HashSet::new();
    for statement in &statements {
        if let Some(captures) = p.definition.captures(statement).or_else(|| p.assignment.captures(statement)) {
            locals.insert(captures.get(1).unwrap().as_str());
        }
    }

    let mut packages = BTreeSet::new();
    for statement in &statements {
        let mut roots: Vec<&str> = Vec::new();
        if let Some(captures) = p.import_stmt.captures(statement) {
            for spec in captures.get(1).unwrap().as_str().split(',') {
                if let Some(dotted) = spec.split_whitespace().next() {
                    if let Some(root) = dotted.split('.').next() {
                        roots.push(root);
                    }
                }
            }
        } else if let Some(captures) = p.from_stmt.captures(statement) {
            roots.push(captures.get(1).unwrap().as_str().split('.').next().unwrap());
        }
        for root in roots {
            if !p.identifier.is_match(root) || stdlib().contains(root) || locals.contains(root) {
                continue;
            }
            let package = package_map().get(root).copied().unwrap_or(root);
            if !package.is_empty()
                && package.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            {
                packages.insert(package.to_string());
            }
        }
    }
    packages.into_iter().collect()
}
