//! Training objective: cross-entropy on the primary prediction plus a soft
//! distance pulling auxiliary predictions toward a detached target.
//!
//! The target per sample is the primary softmax when its confidence (largest
//! entry) exceeds the threshold, otherwise the one-hot ground truth. No
//! gradient flows through the target; auxiliaries receive gradients through
//! their own softmax. A squared-distance-to-ground-truth variant is kept as
//! the consistency baseline.

use ndarray::{ArrayD, IxDyn};

use crate::autograd::{softmax_rows_values, Graph, Scalar, Var};
use crate::error::{Error, Result};

/// How auxiliary predictions are tied back to the primary route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Consistency {
    Soft,
    L2,
    None,
}

impl std::str::FromStr for Consistency {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Consistency::Soft),
            "l2" => Ok(Consistency::L2),
            "none" => Ok(Consistency::None),
            other => Err(Error::Usage(format!(
                "unknown consistency '{other}' (expected soft, l2, or none)"
            ))),
        }
    }
}

impl std::fmt::Display for Consistency {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Consistency::Soft => "soft",
            Consistency::L2 => "l2",
            Consistency::None => "none",
        })
    }
}

/// Graph nodes of one objective evaluation.
pub struct LossTerms {
    pub l_ce: Var,
    pub d_bar: Var,
    pub l_reg: Var,
}

/// Plain numbers for logging, read off the graph.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub d_bar: f64,
    pub l_reg: f64,
}

impl LossTerms {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        LossBreakdown {
            l_ce: g.scalar(self.l_ce).to_f64().unwrap(),
            d_bar: g.scalar(self.d_bar).to_f64().unwrap(),
            l_reg: g.scalar(self.l_reg).to_f64().unwrap(),
        }
    }
}

fn check_labels(batch: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Detached targets [B,K]: primary softmax where confident, one-hot
/// ground truth otherwise.
pub fn soft_targets<T: Scalar>(
    primary_logits: &ArrayD<T>,
    labels: &[usize],
    theta: T,
) -> Result<ArrayD<T>> {
    let shape = primary_logits.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("logits must be [B,K], got {shape:?}")));
    }
    let (b, k) = (shape[0], shape[1]);
    check_labels(b, k, labels)?;
    let probs = softmax_rows_values(primary_logits);
    let mut out = ArrayD::zeros(IxDyn(&[b, k]));
    for (bi, &label) in labels.iter().enumerate() {
        let row: Vec<T> = (0..k).map(|c| probs[IxDyn(&[bi, c])]).collect();
        let confidence = row.iter().cloned().fold(T::zero(), |a, v| a.max(v));
        if confidence > theta {
            for (c, v) in row.into_iter().enumerate() {
                out[IxDyn(&[bi, c])] = v;
            }
        } else {
            out[IxDyn(&[bi, label])] = T::one();
        }
    }
    Ok(out)
}

/// Mean |softmax(aux) - target| over elements, auxiliaries, and batch.
/// Targets enter as constants; gradients reach only the auxiliary logits.
pub fn soft_distance_to_targets<T: Scalar>(
    g: &mut Graph<T>,
    targets: &ArrayD<T>,
    aux_logits: &[Var],
) -> Result<Var> {
    if aux_logits.is_empty() {
        return Ok(g.leaf(ArrayD::from_elem(IxDyn(&[]), T::zero())));
    }
    let mut per_aux = Vec::with_capacity(aux_logits.len());
    for &aux in aux_logits {
        if g.value(aux).shape() != targets.shape() {
            return Err(Error::Shape(format!(
                "auxiliary logits {:?} vs targets {:?}",
                g.value(aux).shape(),
                targets.shape()
            )));
        }
        let sm = g.softmax_rows(aux);
        let diff = g.sub_const(sm, targets.clone());
        let dist = g.abs(diff);
        per_aux.push(g.mean_all(dist));
    }
    let total = if per_aux.len() == 1 {
        per_aux[0]
    } else {
        g.sum_list(&per_aux)
    };
    Ok(g.scale(total, T::from_usize(per_aux.len()).unwrap().recip()))
}

/// Mean soft distance for primary logits already in the graph; the detached
/// target is computed from the primary's current values.
pub fn soft_distance<T: Scalar>(
    g: &mut Graph<T>,
    primary: Var,
    aux_logits: &[Var],
    labels: &[usize],
    theta: T,
) -> Result<Var> {
    let targets = soft_targets(g.value(primary), labels, theta)?;
    soft_distance_to_targets(g, &targets, aux_logits)
}

/// Mean squared distance between one-hot ground truth and every route's
/// softmax, primary included.
pub fn l2_consistency<T: Scalar>(
    g: &mut Graph<T>,
    primary: Var,
    aux_logits: &[Var],
    labels: &[usize],
) -> Result<Var> {
    let shape = g.value(primary).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("logits must be [B,K], got {shape:?}")));
    }
    check_labels(shape[0], shape[1], labels)?;
    let mut onehot = ArrayD::zeros(IxDyn(&shape));
    for (bi, &label) in labels.iter().enumerate() {
        onehot[IxDyn(&[bi, label])] = T::one();
    }
    let routes: Vec<Var> = std::iter::once(primary)
        .chain(aux_logits.iter().copied())
        .collect();
    let mut per_route = Vec::with_capacity(routes.len());
    for &route in &routes {
        if g.value(route).shape() != shape.as_slice() {
            return Err(Error::Shape("route logits shape mismatch".into()));
        }
        let sm = g.softmax_rows(route);
        let diff = g.sub_const(sm, onehot.clone());
        let sq = g.square(diff);
        per_route.push(g.mean_all(sq));
    }
    let total = if per_route.len() == 1 {
        per_route[0]
    } else {
        g.sum_list(&per_route)
    };
    Ok(g.scale(total, T::from_usize(per_route.len()).unwrap().recip()))
}

/// Assemble l_reg = l_ce + d_bar with the selected consistency term.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    primary: Var,
    aux_logits: &[Var],
    labels: &[usize],
    theta: T,
    consistency: Consistency,
) -> Result<LossTerms> {
    let shape = g.value(primary).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("logits must be [B,K], got {shape:?}")));
    }
    check_labels(shape[0], shape[1], labels)?;
    let l_ce = g.cross_entropy_mean(primary, labels);
    let d_bar = match consistency {
        Consistency::Soft => soft_distance(g, primary, aux_logits, labels, theta)?,
        Consistency::L2 => l2_consistency(g, primary, aux_logits, labels)?,
        Consistency::None => g.leaf(ArrayD::from_elem(IxDyn(&[]), T::zero())),
    };
    let l_reg = g.add(l_ce, d_bar);
    Ok(LossTerms { l_ce, d_bar, l_reg })
}
