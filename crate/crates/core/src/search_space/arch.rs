//! Continuous architecture parameters and their discretization.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ops::{OpKind, TaskKind};
use crate::autodiff::softmax;
use crate::error::{Error, Result};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-edge logits over a candidate list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub logits: Vec<Vec<f64>>,
    pub candidates: Vec<OpKind>,
    pub task_kind: TaskKind,
}

impl ArchParams {
    pub fn validate(&self) -> Result<()> {
        for (e, l) in self.logits.iter().enumerate() {
            if l.len() != self.candidates.len() {
                return Err(Error::Config(format!(
                    "edge {e} has {} logits for {} candidates",
                    l.len(),
                    self.candidates.len()
                )));
            }
            if l.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("edge {e} has non-finite logits")));
            }
        }
        Ok(())
    }

    /// Mixture weights per edge.
    pub fn weights(&self) -> Result<Vec<Vec<f64>>> {
        self.logits.iter().map(|l| softmax(l)).collect()
    }
}

/// Argmax operator per edge, ties broken by lowest registry index.
pub fn discretize(alpha: &ArchParams) -> Result<Vec<OpKind>> {
    alpha.validate()?;
    Ok(alpha
        .logits
        .iter()
        .map(|l| alpha.candidates[argmax_first(l)])
        .collect())
}

/// Discrete operator choices for both searched cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub scene: Vec<OpKind>,
    pub task: Vec<OpKind>,
}

impl Architecture {
    /// Every edge of both cells set to `kind`.
    pub fn uniform(kind: OpKind, edges: usize) -> Self {
        Architecture {
            scene: vec![kind; edges],
            task: vec![kind; edges],
        }
    }

    pub fn compact(&self) -> String {
        let join = |v: &[OpKind]| v.iter().map(|k| k.label()).collect::<Vec<_>>().join(" ");
        format!("scene[{}] task[{}]", join(&self.scene), join(&self.task))
    }
}

/// Search result as written to `alpha_final.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchedAlpha {
    pub scene: ArchParams,
    pub task: ArchParams,
}

impl SearchedAlpha {
    pub fn architecture(&self) -> Result<Architecture> {
        Ok(Architecture {
            scene: discretize(&self.scene)?,
            task: discretize(&self.task)?,
        })
    }
}

/// Text dump with one line per edge: `edge i->j op=<kind> w=<weights>`.
pub fn dot_dump(
    name: &str,
    edges: &[(usize, usize)],
    alpha: &ArchParams,
) -> Result<String> {
    let choices = discretize(alpha)?;
    let weights = alpha.weights()?;
    let mut out = String::new();
    writeln!(out, "# {name} candidates={}", alpha
        .candidates
        .iter()
        .map(|k| k.label())
        .collect::<Vec<_>>()
        .join(","))
    .expect("string write");
    for (((src, dst), op), w) in edges.iter().zip(&choices).zip(&weights) {
        let w: Vec<String> = w.iter().map(|v| format!("{v:.4}")).collect();
        writeln!(out, "edge {src}->{dst} op={op} w={}", w.join(",")).expect("string write");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::op_registry;
    use proptest::prelude::*;

    fn alpha(logits: Vec<Vec<f64>>) -> ArchParams {
        ArchParams {
            logits,
            candidates: op_registry(TaskKind::Scene),
            task_kind: TaskKind::Scene,
        }
    }

    #[test]
    fn dominant_logit_and_ties() {
        let a = alpha(vec![vec![0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![0.0; 7]]);
        assert_eq!(discretize(&a).unwrap(), [OpKind::Conv3, OpKind::Conv1]);
    }

    #[test]
    fn invalid_alpha_rejected() {
        assert!(matches!(discretize(&alpha(vec![vec![0.0; 3]])), Err(Error::Config(_))));
        let mut bad = vec![0.0; 7];
        bad[2] = f64::INFINITY;
        assert!(matches!(discretize(&alpha(vec![bad])), Err(Error::Numeric(_))));
    }

    #[test]
    fn dump_format() {
        let a = alpha(vec![vec![0.0, 0.0, 0.0, 0.0, 0.0, 9.0, 0.0]]);
        let text = dot_dump("scene", &[(0, 1)], &a).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# scene candidates=1-C,3-C"));
        let edge = lines.next().unwrap();
        assert!(edge.starts_with("edge 0->1 op=3-2-RDC w="), "{edge}");
        assert_eq!(edge.split("w=").nth(1).unwrap().split(',').count(), 7);
    }

    #[test]
    fn alpha_json_round_trip() {
        let a = SearchedAlpha {
            scene: alpha(vec![vec![0.1; 7]; 7]),
            task: alpha(vec![vec![-0.2; 7]; 7]),
        };
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<SearchedAlpha>(&s).unwrap(), a);
        assert_eq!(a.architecture().unwrap(), Architecture::uniform(OpKind::Conv1, 7));
    }

    proptest! {
        #[test]
        fn argmax_invariant_to_shift_and_scale(
            logits in prop::collection::vec(-10.0f64..10.0, 7),
            shift in -50.0f64..50.0,
            scale in 0.01f64..100.0,
        ) {
            let base = discretize(&alpha(vec![logits.clone()])).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let scaled: Vec<f64> = logits.iter().map(|l| l * scale).collect();
            // Shifting can merge nearly equal logits in floating point; only
            // compare when the top two stay well separated.
            let mut sorted = logits.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            prop_assert_eq!(&discretize(&alpha(vec![shifted])).unwrap(), &base);
            prop_assert_eq!(&discretize(&alpha(vec![scaled])).unwrap(), &base);
        }
    }
}
