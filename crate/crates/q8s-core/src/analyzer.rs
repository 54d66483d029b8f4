//! Static import scanning for notebook cells.
//!
//! A cell is analyzed without executing it: top-level `import` / `from`
//! statements are collected, module roots are reduced to pip package names
//! through a mapping table, and standard-library modules are dropped against
//! a pinned exclusion list. The result is the set of packages the cell's
//! container image must install.

use std::collections::{BTreeSet, HashMap, HashSet};

/// Pinned standard-library module list (one name per line, `#` comments).
const STDLIB_MODULES: &str = include_str!("../data/python_stdlib_modules.txt");

/// Built-in module-to-package mappings for common mismatched names.
const BUILTIN_MAPPINGS: &str = include_str!("../data/module_packages.map");

/// A single notebook cell queued for remote execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellSource {
    pub text: String,
    pub cell_id: String,
}

impl CellSource {
    pub fn new(text: impl Into<String>, cell_id: impl Into<String>) -> Self {
        CellSource { text: text.into(), cell_id: cell_id.into() }
    }
}

/// Sorted, deduplicated pip package names required by one cell.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DependencyManifest {
    packages: Vec<String>,
}

impl DependencyManifest {
    /// Builds a manifest from raw package names, dropping invalid ones and
    /// imposing the sorted/deduplicated invariant.
    pub fn from_packages<I: IntoIterator<Item = String>>(packages: I) -> Self {
        let set: BTreeSet<String> = packages.into_iter().filter(|p| is_valid_package_name(p)).collect();
        DependencyManifest { packages: set.into_iter().collect() }
    }

    pub fn packages(&self) -> &[String] {
        &self.packages
    }

    pub fn is_empty(&self) -> bool {
        self.packages.is_empty()
    }
}

/// Package names accept alphanumerics plus `-`, `_`, and `.`.
pub fn is_valid_package_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Import-module to pip-package translation. Unknown modules map to
/// themselves.
#[derive(Debug, Clone)]
pub struct MappingTable {
    entries: HashMap<String, String>,
}

#[derive(Debug, thiserror::Error)]
pub enum MappingError {
    #[error("cannot read mapping file {path}: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("mapping file {path} line {line}: expected module=package, got {text:?}")]
    BadLine { path: String, line: usize, text: String },
}

impl MappingTable {
    /// The table shipped with the crate.
    pub fn builtin() -> Self {
        let entries = parse_mapping_lines(BUILTIN_MAPPINGS).expect("builtin mapping table is well-formed");
        MappingTable { entries }
    }

    /// An empty table: every module maps to itself.
    pub fn empty() -> Self {
        MappingTable { entries: HashMap::new() }
    }

    /// Merges `module=package` lines from a user-supplied file; later entries
    /// win over existing ones.
    pub fn merge_file(&mut self, path: &std::path::Path) -> Result<(), MappingError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| MappingError::Unreadable { path: path.display().to_string(), source })?;
        let parsed = parse_mapping_lines(&text).map_err(|(line, text)| MappingError::BadLine {
            path: path.display().to_string(),
            line,
            text,
        })?;
        self.entries.extend(parsed);
        Ok(())
    }

    pub fn insert(&mut self, module: impl Into<String>, package: impl Into<String>) {
        self.entries.insert(module.into(), package.into());
    }

    /// Maps a module root to its package name, falling back to the module
    /// name itself.
    pub fn map<'a>(&'a self, module: &'a str) -> &'a str {
        self.entries.get(module).map(String::as_str).unwrap_or(module)
    }
}

impl Default for MappingTable {
    fn default() -> Self {
        MappingTable::builtin()
    }
}

fn parse_mapping_lines(text: &str) -> Result<HashMap<String, String>, (usize, String)> {
    let mut entries = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (module, package) = line.split_once('=').ok_or((idx + 1, raw.to_string()))?;
        let (module, package) = (module.trim(), package.trim());
        if module.is_empty() || !is_valid_package_name(package) {
            return Err((idx + 1, raw.to_string()));
        }
        entries.insert(module.to_string(), package.to_string());
    }
    Ok(entries)
}

/// Scans cells for third-party imports.
#[derive(Debug, Clone)]
pub struct Analyzer {
    stdlib: HashSet<String>,
    mapping: MappingTable,
}

impl Analyzer {
    pub fn new() -> Self {
        Analyzer::with_mapping(MappingTable::builtin())
    }

    pub fn with_mapping(mapping: MappingTable) -> Self {
        let stdlib = STDLIB_MODULES
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        Analyzer { stdlib, mapping }
    }

    pub fn mapping(&self) -> &MappingTable {
        &self.mapping
    }

    /// Extracts the cell's dependency manifest. Only top-level (column-zero)
    /// import statements count; conditional imports inside function bodies or
    /// indented blocks are invisible to remote execution planning.
    pub fn analyze(&self, cell: &CellSource) -> DependencyManifest {
        let locals = local_definitions(&cell.text);
        let mut packages = Vec::new();
        for line in cell.text.lines() {
            if line.starts_with(char::is_whitespace) {
                continue;
            }
            for statement in split_statements(line) {
                for root in import_roots(statement) {
                    if locals.contains(root) || self.stdlib.contains(root) {
                        continue;
                    }
                    packages.push(self.mapping.map(root).to_string());
                }
            }
        }
        DependencyManifest::from_packages(packages)
    }
}

impl Default for Analyzer {
    fn default() -> Self {
        Analyzer::new()
    }
}

/// Splits a physical line on `;`, after stripping a trailing comment.
/// Import statements never contain string literals, so the first `#` on a
/// line that interests us always starts a comment.
fn split_statements(line: &str) -> impl Iterator<Item = &str> {
    let line = line.split('#').next().unwrap_or("");
    line.split(';').map(str::trim).filter(|s| !s.is_empty())
}

/// Module roots named by one statement, or nothing if it is not an import.
fn import_roots(statement: &str) -> Vec<&str> {
    let mut words = statement.split_whitespace();
    match words.next() {
        Some("import") => {
            // import a.b as x, c
            let rest = statement.trim_start()["import".len()..].trim_start();
            rest.split(',')
                .filter_map(|spec| spec.split_whitespace().next())
                .filter_map(|dotted| dotted.split('.').next())
                .filter(|root| is_identifier(root))
                .collect()
        }
        Some("from") => {
            // from a.b import c; relative imports name no installable module.
            let Some(module) = words.next() else { return Vec::new() };
            if module.starts_with('.') || words.next() != Some("import") {
                return Vec::new();
            }
            match module.split('.').next() {
                Some(root) if is_identifier(root) => vec![root],
                _ => Vec::new(),
            }
        }
        _ => Vec::new(),
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Names bound at the top level of the cell by `def`, `class`, or simple
/// assignment. An import whose root is rebound locally is treated as the
/// cell's own symbol, not an installable package.
fn local_definitions(text: &str) -> HashSet<String> {
    let mut names = HashSet::new();
    for line in text.lines() {
        if line.starts_with(char::is_whitespace) {
            continue;
        }
        let statement = line.split('#').next().unwrap_or("").trim_end();
        if let Some(rest) = statement.strip_prefix("def ").or_else(|| {
            statement.strip_prefix("async def ")
        }) {
            if let Some(name) = rest.split(|c: char| c == '(' || c.is_whitespace()).next() {
                if is_identifier(name) {
                    names.insert(name.to_string());
                }
            }
        } else if let Some(rest) = statement.strip_prefix("class ") {
            if let Some(name) = rest.split(|c: char| c == '(' || c == ':' || c.is_whitespace()).next() {
                if is_identifier(name) {
                    names.insert(name.to_string());
                }
            }
        } else if let Some(eq) = statement.find('=') {
            // Simple `name = ...` or `name: T = ...`; skip ==, +=, :=, etc.
            let bytes = statement.as_bytes();
            if bytes.get(eq + 1) == Some(&b'=') {
                continue;
            }
            if eq > 0
                && matches!(
                    bytes[eq - 1],
                    b'+' | b'-' | b'*' | b'/' | b'%' | b'&' | b'|' | b'^' | b'<' | b'>' | b'!' | b':' | b'@' | b'~'
                )
            {
                continue;
            }
            let target = statement[..eq].trim();
            let target = target.split(':').next().unwrap_or("").trim();
            if is_identifier(target) {
                names.insert(target.to_string());
            }
        }
    }
    names
}
