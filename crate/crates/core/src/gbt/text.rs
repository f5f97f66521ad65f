//! Line-oriented text form of a tree ensemble. Floats are written with 17
//! significant digits so a round trip is exact.
//!
//! ```text
//! gbt 1
//! mode multiclass 3
//! learning_rate 1.0000000000000001e-1
//! rounds 2
//! max_depth 6
//! feature_dim 10
//! base -1.0986122886681098e0 ...
//! tree 3
//! s 4 2.5000000000000000e-1 1 2
//! l 1.0000000000000000e0
//! l -1.0000000000000000e0
//! ```

use std::fmt::Write;

use super::{Mode, Tree, TreeEnsemble, TreeNode};
use crate::error::{Error, Result};

fn f(v: f64) -> String {
    format!("{v:.16e}")
}

pub(super) fn write(m: &TreeEnsemble) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "gbt 1");
    match m.mode {
        Mode::Regression => {
            let _ = writeln!(s, "mode regression");
        }
        Mode::Multiclass(k) => {
            let _ = writeln!(s, "mode multiclass {k}");
        }
    }
    let _ = writeln!(s, "learning_rate {}", f(m.learning_rate));
    let _ = writeln!(s, "rounds {}", m.rounds);
    let _ = writeln!(s, "max_depth {}", m.max_depth);
    let _ = writeln!(s, "feature_dim {}", m.feature_dim);
    let base: Vec<String> = m.base_score.iter().map(|&v| f(v)).collect();
    let _ = writeln!(s, "base {}", base.join(" "));
    for t in &m.trees {
        let _ = writeln!(s, "tree {}", t.nodes.len());
        for n in &t.nodes {
            match *n {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let _ = writeln!(s, "s {feature} {} {left} {right}", f(threshold));
                }
                TreeNode::Leaf { value } => {
                    let _ = writeln!(s, "l {}", f(value));
                }
            }
        }
    }
    s
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::Load(format!("tree ensemble line {}: {msg}", self.line))
    }

    fn next_fields(&mut self) -> Result<Vec<&'a str>> {
        for (i, l) in self.inner.by_ref() {
            self.line = i + 1;
            let l = l.trim();
            if !l.is_empty() {
                return Ok(l.split_ascii_whitespace().collect());
            }
        }
        Err(self.err("unexpected end of input"))
    }

    fn keyed(&mut self, key: &str, arity: usize) -> Result<Vec<&'a str>> {
        let f = self.next_fields()?;
        if f[0] != key || (arity > 0 && f.len() != arity + 1) {
            return Err(self.err(format!("expected '{key}'")));
        }
        Ok(f[1..].to_vec())
    }

    fn parse<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.err(format!("cannot parse '{s}'")))
    }
}

pub(super) fn read(text: &str) -> Result<TreeEnsemble> {
    let mut r = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    let version = r.keyed("gbt", 1)?;
    if version[0] != "1" {
        return Err(r.err(format!("unsupported format version {}", version[0])));
    }
    let mode = r.keyed("mode", 0)?;
    let mode = match mode.as_slice() {
        ["regression"] => Mode::Regression,
        ["multiclass", k] => Mode::Multiclass(r.parse(k)?),
        _ => return Err(r.err("unknown mode")),
    };
    let learning_rate: f64 = r.value("learning_rate")?;
    let rounds: usize = r.value("rounds")?;
    let max_depth: usize = r.value("max_depth")?;
    let feature_dim: usize = r.value("feature_dim")?;
    let base = r.keyed("base", 0)?;
    let base_score = base.iter().map(|v| r.parse(v)).collect::<Result<Vec<f64>>>()?;
    if base_score.len() != mode.outputs() {
        return Err(r.err("base score length does not match the mode"));
    }
    let mut trees = Vec::with_capacity(rounds * mode.outputs());
    for _ in 0..rounds * mode.outputs() {
        let n: usize = r.value("tree")?;
        if n == 0 {
            return Err(r.err("empty tree"));
        }
        let mut nodes = Vec::with_capacity(n);
        for i in 0..n {
            let fields = r.next_fields()?;
            let node = match fields.as_slice() {
                ["s", feat, thr, left, right] => {
                    let node = TreeNode::Split {
                        feature: r.parse(feat)?,
                        threshold: r.parse(thr)?,
                        left: r.parse(left)?,
                        right: r.parse(right)?,
                    };
                    if let TreeNode::Split {
                        feature, left, right, ..
                    } = node
                    {
                        if feature >= feature_dim || left <= i || right <= i || left >= n || right >= n {
                            return Err(r.err("split references are out of range"));
                        }
                    }
                    node
                }
                ["l", v] => TreeNode::Leaf { value: r.parse(v)? },
                _ => return Err(r.err("expected a split or leaf node")),
            };
            nodes.push(node);
        }
        trees.push(Tree { nodes });
    }
    Ok(TreeEnsemble {
        mode,
        base_score,
        trees,
        learning_rate,
        rounds,
        max_depth,
        feature_dim,
    })
}

impl Lines<'_> {
    fn value<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.keyed(key, 1)?[0];
        self.parse(v)
    }
}
