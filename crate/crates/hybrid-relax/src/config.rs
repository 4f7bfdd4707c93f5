//! JSON system-definition files.
//!
//! Schema (all numbers IEEE-754 doubles in decimal text):
//!
//! ```json
//! {
//!   "state_dim": 2,
//!   "input_dim": 0,
//!   "modes": [
//!     { "id": 0,
//!       "halfspaces": [ { "normal": [-1.0, 0.0], "offset": 0.0 }, ... ],
//!       "field": { "kind": "affine",
//!                  "params": { "F": [[0,1],[0,0]], "G": [], "w": [0,-1] } } }
//!   ],
//!   "edges": [
//!     { "id": 0, "source": 0, "target": 0,
//!       "guard": { "normal": [-1.0, 0.0], "offset": 0.0 },
//!       "reset": { "A": [[1,0],[0,-0.5]], "b": [0,0] },
//!       "partner": 1,
//!       "target_facet": { "normal": [-1.0, 0.0], "offset": 0.0 } }
//!   ],
//!   "input_box": [[-1.0, 1.0]]
//! }
//! ```
//!
//! `field.kind` is `"affine"` (params `F` n×n, `G` n×m, `w` n) or
//! `"double_pendulum"` (params `m1, m2, l1, l2, g, k, c`). `partner` and
//! `target_facet` are mutually optional: reversible edges name a partner,
//! all others supply the receiving facet plane.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{DoublePendulumParams, Edge, HybridSystem, Mode, Polytope, VectorField};
use crate::{HybridError, Matrix, Result, Vector};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemFile {
    pub state_dim: usize,
    pub input_dim: usize,
    pub modes: Vec<ModeFile>,
    pub edges: Vec<EdgeFile>,
    #[serde(default)]
    pub input_box: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeFile {
    pub id: usize,
    pub halfspaces: Vec<HalfspaceFile>,
    pub field: FieldFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HalfspaceFile {
    pub normal: Vec<f64>,
    pub offset: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum FieldFile {
    Affine {
        #[serde(rename = "F")]
        f: Vec<Vec<f64>>,
        #[serde(rename = "G", default)]
        g: Vec<Vec<f64>>,
        w: Vec<f64>,
    },
    DoublePendulum(DoublePendulumParams),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeFile {
    pub id: usize,
    pub source: usize,
    pub target: usize,
    pub guard: HalfspaceFile,
    pub reset: ResetFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_facet: Option<HalfspaceFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResetFile {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<Matrix> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(HybridError::Config(format!("{what} must be a {nrows}×{ncols} matrix")));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl SystemFile {
    pub fn into_system(self) -> Result<HybridSystem> {
        let n = self.state_dim;
        let m = self.input_dim;
        let mut modes = Vec::with_capacity(self.modes.len());
        for mf in self.modes {
            let rows = mf.halfspaces.len();
            let mut normals = Matrix::zeros(rows, n);
            let mut offsets = Vector::zeros(rows);
            for (i, hs) in mf.halfspaces.iter().enumerate() {
                if hs.normal.len() != n {
                    return Err(HybridError::Config(format!(
                        "mode {}: halfspace normal has {} entries, expected {n}",
                        mf.id,
                        hs.normal.len()
                    )));
                }
                for (j, v) in hs.normal.iter().enumerate() {
                    normals[(i, j)] = *v;
                }
                offsets[i] = hs.offset;
            }
            let field = match mf.field {
                FieldFile::Affine { f, g, w } => {
                    let fmat = matrix_from_rows(&f, n, n, "field F")?;
                    let gmat = if g.is_empty() && m == 0 {
                        Matrix::zeros(n, 0)
                    } else {
                        matrix_from_rows(&g, n, m, "field G")?
                    };
                    if w.len() != n {
                        return Err(HybridError::Config(format!("field w must have {n} entries")));
                    }
                    VectorField::Affine { f: fmat, g: gmat, w: Vector::from_vec(w) }
                }
                FieldFile::DoublePendulum(p) => {
                    if n != 4 {
                        return Err(HybridError::Config(
                            "double_pendulum field requires state_dim 4".into(),
                        ));
                    }
                    VectorField::DoublePendulum(p)
                }
            };
            modes.push(Mode { id: mf.id, polytope: Polytope::new(normals, offsets), field });
        }

        let mut edges = Vec::with_capacity(self.edges.len());
        for ef in self.edges {
            if ef.guard.normal.len() != n {
                return Err(HybridError::Config(format!(
                    "edge {}: guard normal has {} entries, expected {n}",
                    ef.id,
                    ef.guard.normal.len()
                )));
            }
            let (tf_normal, tf_offset) = match ef.target_facet {
                Some(hs) => {
                    if hs.normal.len() != n {
                        return Err(HybridError::Config(format!(
                            "edge {}: target facet normal has {} entries, expected {n}",
                            ef.id,
                            hs.normal.len()
                        )));
                    }
                    (Some(Vector::from_vec(hs.normal)), Some(hs.offset))
                }
                None => (None, None),
            };
            edges.push(Edge {
                id: ef.id,
                source: ef.source,
                target: ef.target,
                guard_normal: Vector::from_vec(ef.guard.normal),
                guard_offset: ef.guard.offset,
                reset_a: matrix_from_rows(&ef.reset.a, n, n, "reset A")?,
                reset_b: if ef.reset.b.len() == n {
                    Vector::from_vec(ef.reset.b)
                } else {
                    return Err(HybridError::Config(format!("reset b must have {n} entries")));
                },
                partner: ef.partner,
                target_facet_normal: tf_normal,
                target_facet_offset: tf_offset,
            });
        }

        Ok(HybridSystem {
            modes,
            edges,
            state_dim: n,
            input_dim: m,
            input_box: self.input_box.iter().map(|&[lo, hi]| (lo, hi)).collect(),
        })
    }

    pub fn from_system(system: &HybridSystem) -> Self {
        let modes = system
            .modes
            .iter()
            .map(|mode| ModeFile {
                id: mode.id,
                halfspaces: (0..mode.polytope.normals.nrows())
                    .map(|i| HalfspaceFile {
                        normal: mode.polytope.normals.row(i).iter().cloned().collect(),
                        offset: mode.polytope.offsets[i],
                    })
                    .collect(),
                field: match &mode.field {
                    VectorField::Affine { f, g, w } => FieldFile::Affine {
                        f: rows_of(f),
                        g: rows_of(g),
                        w: w.iter().cloned().collect(),
                    },
                    VectorField::DoublePendulum(p) => FieldFile::DoublePendulum(*p),
                },
            })
            .collect();
        let edges = system
            .edges
            .iter()
            .map(|e| EdgeFile {
                id: e.id,
                source: e.source,
                target: e.target,
                guard: HalfspaceFile {
                    normal: e.guard_normal.iter().cloned().collect(),
                    offset: e.guard_offset,
                },
                reset: ResetFile { a: rows_of(&e.reset_a), b: e.reset_b.iter().cloned().collect() },
                partner: e.partner,
                target_facet: e.target_facet_normal.as_ref().map(|nrm| HalfspaceFile {
                    normal: nrm.iter().cloned().collect(),
                    offset: e.target_facet_offset.unwrap_or(0.0),
                }),
            })
            .collect();
        Self {
            state_dim: system.state_dim,
            input_dim: system.input_dim,
            modes,
            edges,
            input_box: system.input_box.iter().map(|&(lo, hi)| [lo, hi]).collect(),
        }
    }
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

/// Parse a system file from JSON text.
pub fn system_from_json(text: &str) -> Result<HybridSystem> {
    let file: SystemFile =
        serde_json::from_str(text).map_err(|e| HybridError::Config(e.to_string()))?;
    file.into_system()
}

/// Load a system file from disk.
pub fn load_system(path: impl AsRef<Path>) -> Result<HybridSystem> {
    let text = std::fs::read_to_string(path)?;
    system_from_json(&text)
}

/// Serialize a system to the JSON file format.
pub fn system_to_json(system: &HybridSystem) -> String {
    serde_json::to_string_pretty(&SystemFile::from_system(system)).expect("serializable")
}
