//! Directed social graph and its symmetric-normalized propagation operator.
//!
//! An edge `(src, dst)` means `src` influences `dst` (`dst` follows `src`).
//! Row `i` of the adjacency aggregates over the users who influence `i`, plus
//! a self-loop; the operator is `D̂^{-1/2} Â D̂^{-1/2}` with `D̂` the row sums of `Â`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{LinearOperator, Tape, Tensor, Var};

pub type UserId = usize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SocialGraph {
    n_users: usize,
    edges: Vec<(UserId, UserId)>,
}

impl SocialGraph {
    /// Builds a graph, sorting and deduplicating `edges`.
    pub fn new(n_users: usize, edges: impl IntoIterator<Item = (UserId, UserId)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (src, dst) in edges {
            if src >= n_users || dst >= n_users {
                return Err(Error::invalid(format!(
                    "edge ({src}, {dst}) out of range for {n_users} users"
                )));
            }
            if src == dst {
                return Err(Error::invalid(format!("self-edge on user {src}")));
            }
            set.insert((src, dst));
        }
        Ok(SocialGraph {
            n_users,
            edges: set.into_iter().collect(),
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn edges(&self) -> &[(UserId, UserId)] {
        &self.edges
    }

    /// Users that influence `user`, ascending.
    pub fn influencers(&self) -> Vec<Vec<UserId>> {
        let mut out = vec![Vec::new(); self.n_users];
        for &(src, dst) in &self.edges {
            out[dst].push(src);
        }
        out
    }

    /// Writes the edge-file format: optional `#users=N` header then `src<TAB>dst` lines.
    pub fn write_edges(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "#users={}", self.n_users)?;
        for (s, d) in &self.edges {
            writeln!(buf, "{s}\t{d}")?;
        }
        fs::write(path, buf)?;
        Ok(())
    }
}

/// Reads an edge file.
pub fn load_edges(path: &Path) -> Result<SocialGraph> {
    let text = fs::read_to_string(path)?;
    parse_edges(&text, &path.display().to_string())
}

pub fn parse_edges(text: &str, source_name: &str) -> Result<SocialGraph> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        msg,
    };
    let mut declared = None;
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#users=") {
            if lineno != 1 {
                return Err(parse_err(lineno, "header must be the first line".into()));
            }
            declared = Some(
                rest.trim()
                    .parse::<usize>()
                    .map_err(|e| parse_err(lineno, format!("bad user count: {e}")))?,
            );
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(lineno, format!("expected src<TAB>dst, got {line:?}")));
        };
        let src: UserId = a
            .trim()
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad src {a:?}: {e}")))?;
        let dst: UserId = b
            .trim()
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad dst {b:?}: {e}")))?;
        if src == dst {
            return Err(parse_err(lineno, format!("self-edge on user {src}")));
        }
        if let Some(n) = declared {
            if src >= n || dst >= n {
                return Err(parse_err(
                    lineno,
                    format!("user id {} exceeds declared count {n}", src.max(dst)),
                ));
            }
        }
        edges.push((src, dst));
    }
    let n_users = declared.unwrap_or_else(|| {
        edges
            .iter()
            .map(|&(s, d)| s.max(d) + 1)
            .max()
            .unwrap_or(0)
    });
    SocialGraph::new(n_users, edges)
}

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                t.row_mut(i)[j] = v;
            }
        }
        t
    }
}

/// `D̂^{-1/2} Â D̂^{-1/2}` stored in CSR form; immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedOperator {
    matrix: CsrMatrix,
}

impl NormalizedOperator {
    pub fn build(g: &SocialGraph) -> Self {
        let n = g.n_users();
        let mut rows: Vec<Vec<usize>> = g.influencers();
        for (i, row) in rows.iter_mut().enumerate() {
            row.push(i);
            row.sort_unstable();
        }
        let deg: Vec<f64> = rows.iter().map(|r| r.len() as f64).collect();
        let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();

        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for (i, row) in rows.iter().enumerate() {
            for &j in row {
                indices.push(j);
                values.push(inv_sqrt[i] * inv_sqrt[j]);
            }
            indptr.push(indices.len());
        }
        NormalizedOperator {
            matrix: CsrMatrix {
                n,
                indptr,
                indices,
                values,
            },
        }
    }

    /// The operator of a graph with no edges.
    pub fn identity(n: usize) -> Self {
        NormalizedOperator::build(&SocialGraph {
            n_users: n,
            edges: Vec::new(),
        })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn shared(self) -> Arc<dyn LinearOperator> {
        Arc::new(self)
    }
}

impl LinearOperator for NormalizedOperator {
    fn dim(&self) -> usize {
        self.matrix.n
    }

    fn apply(&self, m: &Tensor) -> Tensor {
        let d = m.cols();
        let mut out = Tensor::zeros(self.matrix.n, d);
        for i in 0..self.matrix.n {
            let dst = out.row_mut(i);
            for (j, v) in self.matrix.row(i) {
                for (o, x) in dst.iter_mut().zip(m.row(j)) {
                    *o += v * x;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, m: &Tensor) -> Tensor {
        let d = m.cols();
        let mut out = Tensor::zeros(self.matrix.n, d);
        for i in 0..self.matrix.n {
            let src = m.row(i);
            for (j, v) in self.matrix.row(i) {
                for (o, x) in out.row_mut(j).iter_mut().zip(src) {
                    *o += v * x;
                }
            }
        }
        out
    }
}

/// `op · m` without recording gradients.
pub fn apply(op: &NormalizedOperator, m: &Tensor) -> Result<Tensor> {
    if m.rows() != op.dim() {
        return Err(Error::shape("apply", &[op.dim(), op.dim()], m.shape()));
    }
    Ok(op.apply(m))
}

/// `opᵏ · m` recorded on the tape.
pub fn apply_traced(
    tape: &mut Tape,
    op: &Arc<dyn LinearOperator>,
    m: Var,
    hops: usize,
) -> Result<Var> {
    let mut out = m;
    for _ in 0..hops {
        out = tape.linear(op, out)?;
    }
    Ok(out)
}
