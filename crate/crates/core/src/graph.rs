//! Star-shaped bipartite label graphs.
//!
//! A [`LabelGraph`] links `k` fine-grained classes to `m` coarse label types.
//! Every fine class has exactly one parent in every type, so the association
//! matrix of a type has a single non-zero per row and is stored as a dense
//! `k x m` parent table. Indices are 0-based in memory and 1-based on disk.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    /// Indices are 0-based.
    #[error("fine class {fine} has parent {parent} in type {ty}, but the type only has {size} coarse classes (0-based indices)")]
    OutOfRangeParent {
        fine: usize,
        ty: usize,
        parent: usize,
        size: usize,
    },
    #[error("coarse type {ty} has no coarse classes")]
    EmptyType { ty: usize },
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("type index {ty} out of range (graph has {m} types)")]
    TypeIndexOutOfRange { ty: usize, m: usize },
    #[error("fine class {fine} has {count} parents in type {ty}; exactly one is required")]
    ParentCount {
        fine: usize,
        ty: usize,
        count: usize,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// The fine classes attached to one coarse class of one type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoarseGroup {
    pub ty: usize,
    pub coarse: usize,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGraph {
    k: usize,
    coarse_sizes: Vec<usize>,
    /// Row-major `k x m`; `parents[i * m + j]` is the coarse class of type `j`
    /// attached to fine class `i`.
    parents: Vec<usize>,
    /// `members[j][c]`: sorted fine classes whose type-`j` parent is `c`.
    members: Vec<Vec<Vec<usize>>>,
}

impl LabelGraph {
    /// Builds a graph from 0-based parent rows (`rows[i][j]`).
    pub fn new(
        k: usize,
        coarse_sizes: Vec<usize>,
        rows: Vec<Vec<usize>>,
    ) -> Result<Self, GraphError> {
        validate(k, &coarse_sizes, &rows)?;
        let m = coarse_sizes.len();
        let parents: Vec<usize> = rows.into_iter().flatten().collect();
        let mut members: Vec<Vec<Vec<usize>>> =
            coarse_sizes.iter().map(|&s| vec![Vec::new(); s]).collect();
        for i in 0..k {
            for j in 0..m {
                members[j][parents[i * m + j]].push(i);
            }
        }
        Ok(Self {
            k,
            coarse_sizes,
            parents,
            members,
        })
    }

    /// Same as [`LabelGraph::new`] with 1-based parent indices, as written in
    /// graph files.
    pub fn from_one_based(
        k: usize,
        coarse_sizes: Vec<usize>,
        rows: Vec<Vec<usize>>,
    ) -> Result<Self, GraphError> {
        let mut zero = Vec::with_capacity(rows.len());
        for (i, row) in rows.into_iter().enumerate() {
            let mut r = Vec::with_capacity(row.len());
            for (j, p) in row.into_iter().enumerate() {
                if p == 0 {
                    return Err(GraphError::OutOfRangeParent {
                        fine: i,
                        ty: j,
                        parent: 0,
                        size: coarse_sizes.get(j).copied().unwrap_or(0),
                    });
                }
                r.push(p - 1);
            }
            zero.push(r);
        }
        Self::new(k, coarse_sizes, zero)
    }

    /// Builds a graph from binary association matrices `assoc[j][i][c]`.
    /// Rows with zero or several ones are rejected.
    pub fn from_association(k: usize, assoc: &[Vec<Vec<bool>>]) -> Result<Self, GraphError> {
        let m = assoc.len();
        let mut sizes = Vec::with_capacity(m);
        let mut rows = vec![vec![0; m]; k];
        for (j, g) in assoc.iter().enumerate() {
            if g.len() != k {
                return Err(GraphError::SizeMismatch(format!(
                    "association matrix {j} has {} rows, expected {k}",
                    g.len()
                )));
            }
            let kj = g.first().map_or(0, Vec::len);
            for (i, row) in g.iter().enumerate() {
                if row.len() != kj {
                    return Err(GraphError::SizeMismatch(format!(
                        "association matrix {j} row {i} has {} columns, expected {kj}",
                        row.len()
                    )));
                }
                let ones: Vec<usize> = row
                    .iter()
                    .enumerate()
                    .filter_map(|(c, &b)| b.then_some(c))
                    .collect();
                if ones.len() != 1 {
                    return Err(GraphError::ParentCount {
                        fine: i,
                        ty: j,
                        count: ones.len(),
                    });
                }
                rows[i][j] = ones[0];
            }
            sizes.push(kj);
        }
        Self::new(k, sizes, rows)
    }

    /// The graph with the same fine classes and no coarse types.
    pub fn softmax(k: usize) -> Self {
        Self {
            k,
            coarse_sizes: Vec::new(),
            parents: Vec::new(),
            members: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.coarse_sizes.len()
    }

    pub fn coarse_sizes(&self) -> &[usize] {
        &self.coarse_sizes
    }

    pub fn coarse_size(&self, ty: usize) -> usize {
        self.coarse_sizes[ty]
    }

    /// Parent of fine class `i` in type `j`. Panics when out of range.
    #[inline]
    pub fn parent(&self, i: usize, j: usize) -> usize {
        self.parents[i * self.m() + j]
    }

    /// All `m` parents of fine class `i`.
    #[inline]
    pub fn parents_of(&self, i: usize) -> &[usize] {
        let m = self.m();
        &self.parents[i * m..(i + 1) * m]
    }

    /// Sorted members of coarse class `c` of type `j`.
    #[inline]
    pub fn members(&self, j: usize, c: usize) -> &[usize] {
        &self.members[j][c]
    }

    /// Association matrix entry `g^j_{i c}`.
    #[inline]
    pub fn connected(&self, i: usize, j: usize, c: usize) -> bool {
        self.parent(i, j) == c
    }

    /// Partition of the fine classes by their type-`j` parent, ordered by
    /// coarse index. Empty coarse classes appear with no members.
    pub fn groups(&self, j: usize) -> Result<Vec<CoarseGroup>, GraphError> {
        if j >= self.m() {
            return Err(GraphError::TypeIndexOutOfRange { ty: j, m: self.m() });
        }
        Ok(self.members[j]
            .iter()
            .enumerate()
            .map(|(c, mem)| CoarseGroup {
                ty: j,
                coarse: c,
                members: mem.clone(),
            })
            .collect())
    }

    /// 0-based parent rows, the inverse of [`LabelGraph::new`].
    pub fn rows(&self) -> Vec<Vec<usize>> {
        (0..self.k).map(|i| self.parents_of(i).to_vec()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "k={} m={}", self.k, self.m());
        if self.m() > 0 {
            let sizes: Vec<String> = self.coarse_sizes.iter().map(|s| s.to_string()).collect();
            let _ = writeln!(out, "sizes={}", sizes.join(","));
        }
        for i in 0..self.k {
            let _ = write!(out, "{}", i + 1);
            for &p in self.parents_of(i) {
                let _ = write!(out, " {}", p + 1);
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, strip_comment(l).trim()))
            .filter(|(_, l)| !l.is_empty());

        let (hline, header) = lines.next().ok_or(GraphError::Parse {
            line: 1,
            msg: "missing `k=<int> m=<int>` header".into(),
        })?;
        let mut k = None;
        let mut m = None;
        for tok in header.split_whitespace() {
            match tok.split_once('=') {
                Some(("k", v)) => k = Some(parse_int(v, hline)?),
                Some(("m", v)) => m = Some(parse_int(v, hline)?),
                _ => {
                    return Err(GraphError::Parse {
                        line: hline,
                        msg: format!("unexpected header token `{tok}`"),
                    })
                }
            }
        }
        let (k, m) = match (k, m) {
            (Some(k), Some(m)) => (k, m),
            _ => {
                return Err(GraphError::Parse {
                    line: hline,
                    msg: "header must define both k and m".into(),
                })
            }
        };
        if k == 0 {
            return Err(GraphError::Parse {
                line: hline,
                msg: "k must be positive".into(),
            });
        }

        let sizes = if m > 0 {
            let (sline, s) = lines.next().ok_or(GraphError::Parse {
                line: hline + 1,
                msg: "missing `sizes=` line".into(),
            })?;
            let v = s.strip_prefix("sizes=").ok_or(GraphError::Parse {
                line: sline,
                msg: "expected `sizes=<k_1>,...,<k_m>`".into(),
            })?;
            let sizes = v
                .split(',')
                .map(|t| parse_int(t.trim(), sline))
                .collect::<Result<Vec<_>, _>>()?;
            if sizes.len() != m {
                return Err(GraphError::Parse {
                    line: sline,
                    msg: format!("expected {m} sizes, found {}", sizes.len()),
                });
            }
            sizes
        } else {
            Vec::new()
        };

        let mut rows: Vec<Option<Vec<usize>>> = vec![None; k];
        let mut last_line = hline;
        for (ln, l) in lines {
            last_line = ln;
            let nums = l
                .split_whitespace()
                .map(|t| parse_int(t, ln))
                .collect::<Result<Vec<_>, _>>()?;
            if nums.len() != m + 1 {
                return Err(GraphError::Parse {
                    line: ln,
                    msg: format!("expected {} integers, found {}", m + 1, nums.len()),
                });
            }
            let fine = nums[0];
            if fine == 0 || fine > k {
                return Err(GraphError::Parse {
                    line: ln,
                    msg: format!("fine index {fine} outside 1..={k}"),
                });
            }
            if rows[fine - 1].is_some() {
                return Err(GraphError::Parse {
                    line: ln,
                    msg: format!("fine index {fine} appears twice"),
                });
            }
            for (j, &p) in nums[1..].iter().enumerate() {
                if p == 0 || p > sizes[j] {
                    return Err(GraphError::Parse {
                        line: ln,
                        msg: format!(
                            "fine class {fine} has parent {p} in type {}, outside 1..={}",
                            j + 1,
                            sizes[j]
                        ),
                    });
                }
            }
            rows[fine - 1] = Some(nums[1..].iter().map(|p| p - 1).collect());
        }
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                r.ok_or(GraphError::Parse {
                    line: last_line,
                    msg: format!("fine index {} never listed", i + 1),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(k, sizes, rows)
    }
}

/// Checks raw graph parts: `rows` must be a `k x m` table of 0-based parents
/// with every entry below the matching coarse size.
pub fn validate(k: usize, coarse_sizes: &[usize], rows: &[Vec<usize>]) -> Result<(), GraphError> {
    if k == 0 {
        return Err(GraphError::SizeMismatch("k must be positive".into()));
    }
    if let Some(ty) = coarse_sizes.iter().position(|&s| s == 0) {
        return Err(GraphError::EmptyType { ty });
    }
    if rows.len() != k {
        return Err(GraphError::SizeMismatch(format!(
            "parent table has {} rows, expected k={k}",
            rows.len()
        )));
    }
    let m = coarse_sizes.len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != m {
            return Err(GraphError::SizeMismatch(format!(
                "parent row {i} has {} entries, expected m={m}",
                row.len()
            )));
        }
        for (j, &p) in row.iter().enumerate() {
            if p >= coarse_sizes[j] {
                return Err(GraphError::OutOfRangeParent {
                    fine: i,
                    ty: j,
                    parent: p,
                    size: coarse_sizes[j],
                });
            }
        }
    }
    Ok(())
}

pub fn load_graph(text: &str) -> Result<LabelGraph, GraphError> {
    LabelGraph::parse(text)
}

pub fn save_graph(graph: &LabelGraph) -> String {
    graph.to_text()
}

fn strip_comment(line: &str) -> &str {
    line.split_once('#').map_or(line, |(a, _)| a)
}

fn parse_int(tok: &str, line: usize) -> Result<usize, GraphError> {
    tok.parse().map_err(|_| GraphError::Parse {
        line,
        msg: format!("`{tok}` is not a non-negative integer"),
    })
}
