#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// `MGRIND_MNIST_DIR`, or `data/mnist` under the workspace root.
pub fn mnist_dir() -> PathBuf {
    match std::env::var_os("MGRIND_MNIST_DIR") {
        Some(d) => PathBuf::from(d),
        None => workspace_root().join("data/mnist"),
    }
}

/// The MNIST directory if all four files are present.
pub fn mnist_available() -> Option<PathBuf> {
    let dir = mnist_dir();
    MNIST_FILES.iter().all(|f| dir.join(f).is_file()).then_some(dir)
}

pub fn model_text(file: &str) -> String {
    let path = workspace_root().join("models/lenet").join(file);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// A model file from `models/lenet` with its data paths pointed at `mnist`.
pub fn model_with_data(file: &str, mnist: &Path) -> String {
    model_text(file).replace("../../data/mnist", &mnist.display().to_string())
}

/// The LeNet solver with some keys replaced, e.g. `("max_iter", "200")`.
pub fn solver_text(net_path: &Path, overrides: &[(&str, &str)]) -> String {
    let mut out = String::new();
    for line in model_text("lenet_solver.solver").lines() {
        let key = line.split(':').next().unwrap_or("").trim();
        let value = match overrides.iter().find(|(k, _)| *k == key) {
            Some((_, v)) => v.to_string(),
            None if key == "net_path" => format!("{:?}", net_path.display().to_string()),
            None => line[key.len() + 1..].trim().to_string(),
        };
        out.push_str(&format!("{key}: {value}\n"));
    }
    out
}

/// Writes `lenet_train.net` and `lenet_solver.solver` into `dir` and returns
/// the solver path.
pub fn lenet_run_dir(dir: &Path, mnist: &Path, overrides: &[(&str, &str)]) -> PathBuf {
    let net = dir.join("lenet_train.net");
    std::fs::write(&net, model_with_data("lenet_train.net", mnist)).unwrap();
    let solver = dir.join("lenet_solver.solver");
    std::fs::write(&solver, solver_text(&net, overrides)).unwrap();
    solver
}

/// A log sink whose contents stay readable after it is handed to a solver.
#[derive(Clone, Default)]
pub struct SharedLog(pub Arc<Mutex<Vec<u8>>>);

impl SharedLog {
    pub fn text(&self) -> String {
        String::from_utf8(self.0.lock().unwrap().clone()).unwrap()
    }
}

impl Write for SharedLog {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}
