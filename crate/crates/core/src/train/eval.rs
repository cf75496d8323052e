use super::config::RunConfig;
use crate::data::{Checkpoint, SegSample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, pr_curve, MaskPair, MetricsReport, DEFAULT_BETA_SQ, DEFAULT_THRESHOLD};
use crate::model::DsfNet;
use crate::real::Real;
use crate::tensor::Tensor;

/// The network described by `cfg` with weights and norm statistics from `ck`.
pub fn load_model<T: Real>(cfg: &RunConfig, ck: &Checkpoint) -> Result<DsfNet<T>> {
    let mut net = DsfNet::new(cfg.net_config(), cfg.run.seed)?;
    ck.restore_store(&mut net.params)?;
    Ok(net)
}

/// Eval-mode saliency map (1×H×W) for one 3×H×W image.
pub fn predict_image<T: Real>(net: &mut DsfNet<T>, image: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("expected a 3×H×W image, got {s:?}")));
    }
    let x = image.cast::<T>().reshape(vec![1, 3, s[1], s[2]])?;
    net.predict(&x)?.cast::<f64>().reshape(vec![1, s[1], s[2]])
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub rows: Vec<(String, MetricsReport)>,
    /// Per-threshold (precision, recall) averaged over images.
    pub pr: Vec<(f64, f64)>,
}

/// Per-image metrics at threshold 0.5 and β² = 0.3, and the mean PR curve.
pub fn evaluate_samples<T: Real>(
    net: &mut DsfNet<T>,
    samples: &[(String, SegSample)],
    thresholds: &[f64],
) -> Result<EvalOutcome> {
    let mut rows = Vec::with_capacity(samples.len());
    let mut pr = vec![(0.0, 0.0); thresholds.len()];
    for (id, s) in samples {
        let map = predict_image(net, &s.image)?;
        let pair = MaskPair::from_tensors(&map, &s.mask)?;
        for (acc, (p, r)) in pr.iter_mut().zip(pr_curve(&pair, thresholds)?) {
            acc.0 += p;
            acc.1 += r;
        }
        rows.push((id.clone(), evaluate(&pair, DEFAULT_THRESHOLD, DEFAULT_BETA_SQ)?));
    }
    let n = samples.len().max(1) as f64;
    Ok(EvalOutcome {
        rows,
        pr: pr.into_iter().map(|(p, r)| (p / n, r / n)).collect(),
    })
}
