use std::collections::BTreeSet;

use serde::Serialize;

use super::CheckpointHandle;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MissingTensor {
    pub name: String,
    /// Indices of the checkpoints that do not contain the tensor.
    pub absent_from: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeConflict {
    pub name: String,
    /// Shape per checkpoint, in input order (`None` where absent).
    pub shapes: Vec<Option<Vec<usize>>>,
}

/// Which tensors can be merged across a set of checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AlignmentReport {
    /// Present everywhere with identical shapes, sorted by name.
    pub mergeable: Vec<String>,
    pub missing: Vec<MissingTensor>,
    pub shape_conflicts: Vec<ShapeConflict>,
}

impl AlignmentReport {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty() && self.shape_conflicts.is_empty()
    }

    /// One-line human summary of the mismatches.
    pub fn describe_mismatches(&self) -> String {
        let mut parts = Vec::new();
        for m in &self.missing {
            parts.push(format!(
                "{} missing from checkpoint(s) {:?}",
                m.name, m.absent_from
            ));
        }
        for c in &self.shape_conflicts {
            let shapes: Vec<String> = c
                .shapes
                .iter()
                .map(|s| match s {
                    Some(s) => format!("{s:?}"),
                    None => "absent".into(),
                })
                .collect();
            parts.push(format!(
                "{} has conflicting shapes {}",
                c.name,
                shapes.join(" vs ")
            ));
        }
        parts.join("; ")
    }
}

/// Compare tensor indices across checkpoints. Dtype differences are allowed;
/// names and shapes must agree. A tensor that is both missing somewhere and
/// shape-conflicting elsewhere is reported under both.
pub fn validate_aligned(handles: &[&CheckpointHandle]) -> AlignmentReport {
    let all: BTreeSet<&str> = handles.iter().flat_map(|h| h.names()).collect();
    let mut report = AlignmentReport::default();
    for name in all {
        let shapes: Vec<Option<Vec<usize>>> = handles
            .iter()
            .map(|h| h.info(name).map(|i| i.shape.clone()))
            .collect();
        let absent_from: Vec<usize> = shapes
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_none())
            .map(|(i, _)| i)
            .collect();
        let distinct = shapes.iter().flatten().collect::<BTreeSet<_>>().len();
        if distinct > 1 {
            report.shape_conflicts.push(ShapeConflict {
                name: name.to_string(),
                shapes,
            });
        }
        if !absent_from.is_empty() {
            report.missing.push(MissingTensor {
                name: name.to_string(),
                absent_from,
            });
        } else if distinct == 1 {
            report.mergeable.push(name.to_string());
        }
    }
    report
}
