use std::fmt;
use std::path::Path;

use super::fields::{DResult, Fields};
use super::tree::{decode, parse_tree};
use super::write::quote;
use crate::error::{Diagnostic, Pos};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrPolicy {
    Fixed,
    /// `base_lr * gamma^floor(iter / stepsize)`
    Step { gamma: f64, stepsize: u64 },
    /// `base_lr * (1 + gamma * iter)^(-power)`
    Inv { gamma: f64, power: f64 },
}

/// Training hyperparameters read from a `.solver` file.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverDef {
    /// Relative paths are resolved against the solver file's directory.
    pub net_path: String,
    pub base_lr: f64,
    pub lr_policy: LrPolicy,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iter: u64,
    /// `None` writes only the final snapshot.
    pub snapshot_interval: Option<u64>,
    pub snapshot_prefix: String,
    /// 0 disables periodic testing.
    pub test_interval: u64,
    pub test_iter: u64,
    /// 0 disables progress lines.
    pub display: u64,
    pub seed: u64,
}

impl SolverDef {
    pub fn new(net_path: impl Into<String>, base_lr: f64, max_iter: u64) -> Self {
        SolverDef {
            net_path: net_path.into(),
            base_lr,
            lr_policy: LrPolicy::Fixed,
            momentum: 0.0,
            weight_decay: 0.0,
            max_iter,
            snapshot_interval: None,
            snapshot_prefix: "snapshot".into(),
            test_interval: 500,
            test_iter: 100,
            display: 100,
            seed: 0,
        }
    }

    /// Learning rate in effect at iteration `iter`.
    pub fn lr_at(&self, iter: u64) -> f64 {
        match self.lr_policy {
            LrPolicy::Fixed => self.base_lr,
            LrPolicy::Step { gamma, stepsize } => self.base_lr * gamma.powf((iter / stepsize) as f64),
            LrPolicy::Inv { gamma, power } => self.base_lr * (1.0 + gamma * iter as f64).powf(-power),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        parse_solverdef(decode(&bytes).map_err(Error::Parse)?)
    }
}

impl fmt::Display for SolverDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "net_path: {}", quote(&self.net_path))?;
        writeln!(f, "base_lr: {}", self.base_lr)?;
        match self.lr_policy {
            LrPolicy::Fixed => writeln!(f, "lr_policy: fixed")?,
            LrPolicy::Step { gamma, stepsize } => {
                writeln!(f, "lr_policy: step\ngamma: {gamma}\nstepsize: {stepsize}")?
            }
            LrPolicy::Inv { gamma, power } => writeln!(f, "lr_policy: inv\ngamma: {gamma}\npower: {power}")?,
        }
        writeln!(f, "momentum: {}", self.momentum)?;
        writeln!(f, "weight_decay: {}", self.weight_decay)?;
        writeln!(f, "max_iter: {}", self.max_iter)?;
        if let Some(s) = self.snapshot_interval {
            writeln!(f, "snapshot_interval: {s}")?;
        }
        writeln!(f, "snapshot_prefix: {}", quote(&self.snapshot_prefix))?;
        writeln!(f, "test_interval: {}", self.test_interval)?;
        writeln!(f, "test_iter: {}", self.test_iter)?;
        writeln!(f, "display: {}", self.display)?;
        writeln!(f, "seed: {}", self.seed)
    }
}

pub fn parse_solverdef(src: &str) -> Result<SolverDef> {
    convert(src).map_err(Error::Parse)
}

fn convert(src: &str) -> DResult<SolverDef> {
    let tree = parse_tree(src)?;
    let f = Fields::new(&tree, Pos { line: 1, col: 1 }, "solver definition");
    f.check(
        &[
            "net_path",
            "base_lr",
            "lr_policy",
            "gamma",
            "stepsize",
            "power",
            "momentum",
            "weight_decay",
            "max_iter",
            "snapshot_interval",
            "snapshot_prefix",
            "test_interval",
            "test_iter",
            "display",
            "seed",
        ],
        &[],
    )?;
    let at = |key: &str| f.get(key).map_or(f.pos, |e| e.pos);
    let bad = |key: &str, msg: &str| Diagnostic::new(at(key), format!("`{key}` {msg}"));

    let (net_path, _) = f.string("net_path")?.ok_or_else(|| f.missing("net_path"))?;
    let base_lr = f.real("base_lr")?.ok_or_else(|| f.missing("base_lr"))?;
    if base_lr <= 0.0 {
        return Err(bad("base_lr", "must be positive"));
    }
    let gamma = f.real("gamma")?;
    let stepsize = f.u64("stepsize")?;
    let power = f.real("power")?;
    let unused = |key: &str, present: bool, policy: &str| -> DResult<()> {
        if present {
            Err(bad(key, &format!("does not apply to lr_policy {policy}")))
        } else {
            Ok(())
        }
    };
    let lr_policy = match f.ident("lr_policy")? {
        None => {
            unused("gamma", gamma.is_some(), "fixed")?;
            unused("stepsize", stepsize.is_some(), "fixed")?;
            unused("power", power.is_some(), "fixed")?;
            LrPolicy::Fixed
        }
        Some((p, pos)) => {
            let needs = |key: &str| Diagnostic::new(pos, format!("lr_policy {p} needs `{key}`"));
            match p.as_str() {
            "fixed" => {
                unused("gamma", gamma.is_some(), "fixed")?;
                unused("stepsize", stepsize.is_some(), "fixed")?;
                unused("power", power.is_some(), "fixed")?;
                LrPolicy::Fixed
            }
            "step" => {
                unused("power", power.is_some(), "step")?;
                let gamma = gamma.ok_or_else(|| needs("gamma"))?;
                let stepsize = stepsize.ok_or_else(|| needs("stepsize"))?;
                if stepsize == 0 {
                    return Err(bad("stepsize", "must be at least 1"));
                }
                if gamma < 0.0 {
                    return Err(bad("gamma", "must not be negative"));
                }
                LrPolicy::Step { gamma, stepsize }
            }
            "inv" => {
                unused("stepsize", stepsize.is_some(), "inv")?;
                let gamma = gamma.ok_or_else(|| needs("gamma"))?;
                let power = power.ok_or_else(|| needs("power"))?;
                if power <= 0.0 {
                    return Err(bad("power", "must be positive"));
                }
                if gamma < 0.0 {
                    return Err(bad("gamma", "must not be negative"));
                }
                LrPolicy::Inv { gamma, power }
            }
            other => return Err(Diagnostic::new(pos, format!("unknown lr_policy `{other}`"))),
            }
        }
    };
    let momentum = f.real("momentum")?.unwrap_or(0.0);
    if !(0.0..1.0).contains(&momentum) {
        return Err(bad("momentum", "must be in [0, 1)"));
    }
    let weight_decay = f.real("weight_decay")?.unwrap_or(0.0);
    if weight_decay < 0.0 {
        return Err(bad("weight_decay", "must not be negative"));
    }
    let snapshot_interval = f.u64("snapshot_interval")?;
    if snapshot_interval == Some(0) {
        return Err(bad("snapshot_interval", "must be at least 1"));
    }
    let d = SolverDef::new("", 1.0, 0);
    Ok(SolverDef {
        net_path,
        base_lr,
        lr_policy,
        momentum,
        weight_decay,
        max_iter: f.u64("max_iter")?.ok_or_else(|| f.missing("max_iter"))?,
        snapshot_interval,
        snapshot_prefix: f.string("snapshot_prefix")?.map_or(d.snapshot_prefix, |s| s.0),
        test_interval: f.u64("test_interval")?.unwrap_or(d.test_interval),
        test_iter: f.u64("test_iter")?.unwrap_or(d.test_iter),
        display: f.u64("display")?.unwrap_or(d.display),
        seed: f.u64("seed")?.unwrap_or(d.seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const INV: &str = r#"
        net_path: "lenet.net"
        base_lr: 0.01
        momentum: 0.9
        lr_policy: inv
        gamma: 0.0001
        power: 0.75
        max_iter: 10000
    "#;

    #[test]
    fn field_mapping_and_defaults() {
        let s = parse_solverdef(INV).unwrap();
        assert_eq!(s.net_path, "lenet.net");
        assert_eq!(s.base_lr, 0.01);
        assert_eq!(s.momentum, 0.9);
        assert_eq!(s.lr_policy, LrPolicy::Inv { gamma: 0.0001, power: 0.75 });
        assert_eq!(s.weight_decay, 0.0);
        assert_eq!((s.display, s.test_interval, s.test_iter), (100, 500, 100));

        let fixed = parse_solverdef("net_path: \"a\" base_lr: 1 max_iter: 5").unwrap();
        assert_eq!(fixed.lr_policy, LrPolicy::Fixed);
        assert_eq!(fixed.momentum, 0.0);
    }

    #[test]
    fn round_trip_through_display() {
        let s = parse_solverdef(INV).unwrap();
        assert_eq!(parse_solverdef(&s.to_string()).unwrap(), s);
        let mut step = s.clone();
        step.lr_policy = LrPolicy::Step { gamma: 0.1, stepsize: 100 };
        step.snapshot_interval = Some(5);
        assert_eq!(parse_solverdef(&step.to_string()).unwrap(), step);
    }

    #[test]
    fn range_errors() {
        let base = "net_path: \"a\" base_lr: 0.1 max_iter: 1";
        for (extra, needle) in [
            ("momentum: 1.0", "momentum"),
            ("momentum: -0.1", "momentum"),
            ("weight_decay: -1", "weight_decay"),
            ("lr_policy: step gamma: 0.1", "stepsize"),
            ("lr_policy: step gamma: 0.1 stepsize: 0", "stepsize"),
            ("lr_policy: inv gamma: 0.1 power: 0", "power"),
            ("lr_policy: cosine", "cosine"),
            ("gamma: 0.5", "gamma"),
            ("bogus: 1", "bogus"),
            ("max_iter: 2", "duplicate"),
            ("snapshot_interval: 0", "snapshot_interval"),
        ] {
            let err = parse_solverdef(&format!("{base}\n{extra}")).unwrap_err().to_string();
            assert!(err.contains(needle), "{extra}: {err}");
            assert!(err.contains("2:"), "{extra}: {err}");
        }
        assert!(parse_solverdef("base_lr: 0.1 max_iter: 1").unwrap_err().to_string().contains("net_path"));
        assert!(parse_solverdef("net_path: \"a\" max_iter: 1").unwrap_err().to_string().contains("base_lr"));
        assert!(parse_solverdef("net_path: \"a\" base_lr: -1 max_iter: 1").is_err());
    }

    #[test]
    fn lr_schedules() {
        let mut s = SolverDef::new("n", 0.01, 1000);
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(777), 0.01);
        s.lr_policy = LrPolicy::Step { gamma: 0.1, stepsize: 100 };
        assert!((s.lr_at(250) - 1e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(99), 0.01);
        s.lr_policy = LrPolicy::Inv { gamma: 1e-4, power: 0.75 };
        assert_eq!(s.lr_at(0), 0.01);
        let expected = 0.01 * (1.0f64 + 1e-4 * 5000.0).powf(-0.75);
        assert_eq!(s.lr_at(5000), expected);
    }
}
