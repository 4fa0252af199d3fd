use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of a pair carries an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModalityCombo {
    /// (T+I, T): image query, text target.
    TiT,
    /// (T, T+I): text query, image target.
    TTi,
    /// (T+I, T+I): images on both sides.
    TiTi,
}

impl ModalityCombo {
    pub const ALL: [ModalityCombo; 3] = [ModalityCombo::TiT, ModalityCombo::TTi, ModalityCombo::TiTi];

    pub fn tag(self) -> &'static str {
        match self {
            ModalityCombo::TiT => "TI_T",
            ModalityCombo::TTi => "T_TI",
            ModalityCombo::TiTi => "TI_TI",
        }
    }

    pub fn query_has_image(self) -> bool {
        matches!(self, ModalityCombo::TiT | ModalityCombo::TiTi)
    }

    pub fn target_has_image(self) -> bool {
        matches!(self, ModalityCombo::TTi | ModalityCombo::TiTi)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ModalityCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModalityCombo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModalityCombo::ALL
            .into_iter()
            .find(|c| c.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality combination `{s}`")))
    }
}

/// Meta-task bucket; selects the instruction prefix and the reporting bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskTag {
    Classification,
    Retrieval,
    Vqa,
    Grounding,
}

impl TaskTag {
    pub const ALL: [TaskTag; 4] = [
        TaskTag::Classification,
        TaskTag::Retrieval,
        TaskTag::Vqa,
        TaskTag::Grounding,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            TaskTag::Classification => "classification",
            TaskTag::Retrieval => "retrieval",
            TaskTag::Vqa => "vqa",
            TaskTag::Grounding => "grounding",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for TaskTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskTag::ALL
            .into_iter()
            .find(|t| t.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown task tag `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Ind,
    Ood,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Ind => "IND",
            Split::Ood => "OOD",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "IND" => Ok(Split::Ind),
            "OOD" => Ok(Split::Ood),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// Raw image stand-in: `patches × patch_dim` features, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct PatchGrid {
    patches: usize,
    patch_dim: usize,
    data: Vec<f64>,
}

impl PatchGrid {
    pub fn new(patches: usize, patch_dim: usize, data: Vec<f64>) -> Result<Self> {
        if patches == 0 || patch_dim == 0 || data.len() != patches * patch_dim {
            return Err(Error::Dimension {
                op: "patch_grid",
                left: vec![patches, patch_dim],
                right: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("patch grid has non-finite values"));
        }
        Ok(Self {
            patches,
            patch_dim,
            data,
        })
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Per-feature mean over patches.
    pub fn mean_patch(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.patch_dim];
        for row in self.data.chunks(self.patch_dim) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= self.patches as f64);
        out
    }
}

impl TryFrom<Vec<Vec<f64>>> for PatchGrid {
    type Error = String;

    fn try_from(rows: Vec<Vec<f64>>) -> std::result::Result<Self, String> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err("ragged patch grid".into());
        }
        let n = rows.len();
        PatchGrid::new(n, dim, rows.into_iter().flatten().collect()).map_err(|e| e.to_string())
    }
}

impl From<PatchGrid> for Vec<Vec<f64>> {
    fn from(g: PatchGrid) -> Self {
        g.data.chunks(g.patch_dim).map(<[f64]>::to_vec).collect()
    }
}

/// One query or target: instruction tokens, content tokens, optional image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalInput {
    pub instruction: Vec<u32>,
    pub content: Vec<u32>,
    pub image: Option<PatchGrid>,
}

impl ModalInput {
    pub fn has_image(&self) -> bool {
        self.image.is_some()
    }

    /// The same input with its image removed; inputs without an image are
    /// returned unchanged.
    pub fn drop_image(&self) -> ModalInput {
        ModalInput {
            instruction: self.instruction.clone(),
            content: self.content.clone(),
            image: None,
        }
    }

    /// Instruction followed by content.
    pub fn text(&self) -> Vec<u32> {
        self.instruction
            .iter()
            .chain(&self.content)
            .copied()
            .collect()
    }
}

/// A query with its positive target.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub query: ModalInput,
    pub target: ModalInput,
    pub combo: ModalityCombo,
    pub task: TaskTag,
    pub split: Split,
    pub class_id: usize,
}

impl PairRecord {
    /// Image presence on both sides agrees with the combination tag.
    pub fn is_consistent(&self) -> bool {
        self.query.has_image() == self.combo.query_has_image()
            && self.target.has_image() == self.combo.target_has_image()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combo_tags_round_trip() {
        for c in ModalityCombo::ALL {
            assert_eq!(c.tag().parse::<ModalityCombo>().unwrap(), c);
        }
        assert!("X_Y".parse::<ModalityCombo>().is_err());
    }

    #[test]
    fn combo_determines_image_sides() {
        assert!(ModalityCombo::TiT.query_has_image() && !ModalityCombo::TiT.target_has_image());
        assert!(!ModalityCombo::TTi.query_has_image() && ModalityCombo::TTi.target_has_image());
        assert!(ModalityCombo::TiTi.query_has_image() && ModalityCombo::TiTi.target_has_image());
    }

    #[test]
    fn drop_image_clears_only_the_image_and_is_idempotent() {
        let grid = PatchGrid::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = ModalInput {
            instruction: vec![1, 2],
            content: vec![9, 10],
            image: Some(grid),
        };
        let d = x.drop_image();
        assert_eq!(d.instruction, x.instruction);
        assert_eq!(d.content, x.content);
        assert!(d.image.is_none());
        assert_eq!(d.drop_image(), d);
        assert_eq!(d.drop_image(), d.clone());
    }

    #[test]
    fn patch_grid_rejects_bad_shapes() {
        assert!(PatchGrid::new(2, 2, vec![1.0; 3]).is_err());
        assert!(PatchGrid::new(1, 1, vec![f64::NAN]).is_err());
        let g = PatchGrid::new(2, 1, vec![1.0, 3.0]).unwrap();
        assert_eq!(g.mean_patch(), vec![2.0]);
    }
}
