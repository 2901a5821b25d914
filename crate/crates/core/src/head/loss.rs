use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::BoxDelta;
use crate::tensor::Tensor;

use super::config::ComponentGroup;
use super::model::HeadOutput;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub xy: f64,
    pub alpha: f64,
    pub wh: f64,
    pub cls: f64,
    /// Smooth-L1 transition point.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            xy: 1.0,
            alpha: 1.0,
            wh: 1.0,
            cls: 1.0,
            beta: 1.0 / 9.0,
        }
    }
}

/// Unweighted loss terms; regression terms are zero for background samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub xy: f64,
    pub alpha: f64,
    pub wh: f64,
    pub cls: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossTerms {
    fn add_assign(&mut self, o: Self) {
        self.xy += o.xy;
        self.alpha += o.alpha;
        self.wh += o.wh;
        self.cls += o.cls;
        self.total += o.total;
    }
}

impl LossTerms {
    pub fn scaled(self, c: f64) -> Self {
        Self {
            xy: self.xy * c,
            alpha: self.alpha * c,
            wh: self.wh * c,
            cls: self.cls * c,
            total: self.total * c,
        }
    }
}

/// Smooth-L1 per component group against `target` (when given) plus
/// cross-entropy on the class logits.
///
/// `target` is `None` for background proposals, which supervise only the class.
pub fn head_loss(
    tape: &mut Tape<'_>,
    out: &HeadOutput,
    target: Option<&BoxDelta>,
    label: usize,
    weights: &LossWeights,
) -> Result<(Var, LossTerms)> {
    let classes = out.class_logits.len();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut terms = LossTerms::default();
    let cls = tape.cross_entropy(out.logits_var, label)?;
    terms.cls = tape.value(cls).item();
    let mut total = tape.scale(cls, weights.cls);

    if let Some(t) = target {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("target {t:?}")));
        }
        let all = t.to_array();
        for group in ComponentGroup::ALL {
            let comps = group.components();
            let want = Tensor::new(&[1, comps.len()], comps.iter().map(|&c| all[c]).collect())?;
            let l = tape.smooth_l1(out.group_vars[group.index()], &want, weights.beta)?;
            let value = tape.value(l).item();
            let w = match group {
                ComponentGroup::Xy => {
                    terms.xy = value;
                    weights.xy
                }
                ComponentGroup::Alpha => {
                    terms.alpha = value;
                    weights.alpha
                }
                ComponentGroup::Wh => {
                    terms.wh = value;
                    weights.wh
                }
            };
            let l = tape.scale(l, w);
            total = tape.add(total, l)?;
        }
    }
    terms.total = tape.value(total).item();
    Ok((total, terms))
}
