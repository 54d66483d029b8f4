//! Notebook-cell corpus with hand-frozen expected dependency manifests.
//! Exercises the corners of top-level import scanning: aliases, renames,
//! shadowing, relative imports, comments, and plain weird spacing.

pub struct CorpusCell {
    pub name: &'static str,
    pub text: &'static str,
    /// Expected package list, sorted and deduplicated, frozen by hand.
    pub expected: &'static [&'static str],
}

pub const CELLS: &[CorpusCell] = &[
    CorpusCell { name: "empty", text: "", expected: &[] },
    CorpusCell {
        name: "stdlib_only",
        text: "import os\nimport json\nfrom pathlib import Path",
        expected: &[],
    },
    CorpusCell {
        name: "qiskit_pair",
        text: "import qiskit\nfrom qiskit_aer import AerSimulator",
        expected: &["qiskit", "qiskit-aer"],
    },
    CorpusCell {
        name: "pennylane_alias",
        text: "from pennylane import numpy as np",
        expected: &["pennylane"],
    },
    CorpusCell {
        name: "dotted_alias",
        text: "import matplotlib.pyplot as plt\nimport numpy as np",
        expected: &["matplotlib", "numpy"],
    },
    CorpusCell {
        name: "comma_imports",
        text: "import numpy, scipy, pandas",
        expected: &["numpy", "pandas", "scipy"],
    },
    CorpusCell {
        name: "semicolon_imports",
        text: "import torch; import torchvision",
        expected: &["torch", "torchvision"],
    },
    CorpusCell {
        name: "mapped_renames",
        text: "import cv2\nfrom PIL import Image\nimport yaml",
        expected: &["opencv-python", "pillow", "pyyaml"],
    },
    CorpusCell {
        name: "sklearn_submodule",
        text: "import sklearn\nfrom sklearn.linear_model import LinearRegression",
        expected: &["scikit-learn"],
    },
    CorpusCell {
        name: "guarded_import_is_invisible",
        text: "try:\n    import cupy\nexcept ImportError:\n    cupy = None\nimport numpy",
        expected: &["numpy"],
    },
    CorpusCell {
        name: "def_shadows_import",
        text: "import helper\ndef helper():\n    return 1",
        expected: &[],
    },
    CorpusCell {
        name: "assignment_shadows_import",
        text: "import config\nconfig = {'shots': 100}",
        expected: &[],
    },
    CorpusCell {
        name: "annotated_assignment_shadows",
        text: "import result\nresult: dict = {}",
        expected: &[],
    },
    CorpusCell {
        name: "augmented_assignment_keeps_import",
        text: "import counter\ntotal = 0\ntotal += 1",
        expected: &["counter"],
    },
    CorpusCell {
        name: "relative_imports",
        text: "from . import sibling\nfrom ..pkg import tool\nimport requests",
        expected: &["requests"],
    },
    CorpusCell {
        name: "comments",
        text: "# import fake\nimport httpx  # http client\nimport os  # stdlib",
        expected: &["httpx"],
    },
    CorpusCell {
        name: "future_import",
        text: "from __future__ import annotations\nimport numpy",
        expected: &["numpy"],
    },
    CorpusCell {
        name: "quantum_stack",
        text: "import pennylane as qml\nfrom pennylane_lightning import LightningQubit\nimport braket",
        expected: &["braket", "pennylane", "pennylane-lightning"],
    },
    CorpusCell {
        name: "qiskit_runtime",
        text: "from qiskit_ibm_runtime import QiskitRuntimeService\nfrom qiskit.circuit import QuantumCircuit",
        expected: &["qiskit", "qiskit-ibm-runtime"],
    },
    CorpusCell {
        name: "renamed_distributions",
        text: "from bs4 import BeautifulSoup\nfrom dateutil import parser\nimport dotenv",
        expected: &["beautifulsoup4", "python-dateutil", "python-dotenv"],
    },
    CorpusCell {
        name: "bell_pair_cell",
        text: "import qiskit\nfrom qiskit_aer import AerSimulator\n\nqc = qiskit.QuantumCircuit(2, 2)\nqc.h(0)\nqc.cx(0, 1)\nqc.measure([0, 1], [0, 1])\nresult = AerSimulator().run(qc, shots=1000).result()\nprint(result.get_counts())",
        expected: &["qiskit", "qiskit-aer"],
    },
    CorpusCell {
        name: "dynamic_import_is_invisible",
        text: "import importlib\nmod = importlib.import_module('numpy')",
        expected: &[],
    },
    CorpusCell {
        name: "duplicate_roots",
        text: "import scipy\nimport scipy.optimize\nfrom scipy import stats",
        expected: &["scipy"],
    },
    CorpusCell {
        name: "odd_whitespace",
        text: "import\tnumpy\nfrom  pandas  import DataFrame",
        expected: &["numpy", "pandas"],
    },
    CorpusCell {
        name: "keyword_prefixed_names",
        text: "important = 5\nfromage = 'cheese'\nimport flask",
        expected: &["flask"],
    },
    CorpusCell {
        name: "class_shadows_import",
        text: "import model\nclass model:\n    pass",
        expected: &[],
    },
    CorpusCell {
        name: "walrus_does_not_shadow",
        text: "import data\nif (size := 10) > 5:\n    pass",
        expected: &["data"],
    },
    CorpusCell {
        name: "no_imports_at_all",
        text: "print('hello world')",
        expected: &[],
    },
];
