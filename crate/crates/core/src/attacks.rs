//! The five label-reconstruction attacks. Each maps a shared
//! [`GradientUpdate`] (plus declared attacker knowledge) to a reconstructed
//! per-class label histogram.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientUpdate, Model};
use crate::numerics::{softmax, solve_nonneg_least_squares, Matrix, SeededRng};

/// Bias components below this magnitude are treated as zero in the iLRG
/// feature-recovery ratio.
pub const ILRG_BIAS_EPS: f64 = 1e-8;

/// Per-class label counts for one batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelHistogram {
    counts: Vec<usize>,
}

impl LabelHistogram {
    pub fn zeros(class_count: usize) -> Self {
        Self {
            counts: vec![0; class_count],
        }
    }

    pub fn from_counts(counts: Vec<usize>) -> Self {
        Self { counts }
    }

    pub fn from_labels(labels: &[usize], class_count: usize) -> Result<Self> {
        let mut counts = vec![0usize; class_count];
        for &label in labels {
            if label >= class_count {
                return Err(Error::Index {
                    index: label,
                    len: class_count,
                });
            }
            counts[label] += 1;
        }
        Ok(Self { counts })
    }

    /// `n` counts spread as evenly as possible, remainder to low indices.
    pub fn uniform(class_count: usize, n: usize) -> Self {
        let counts = (0..class_count)
            .map(|c| n / class_count + usize::from(c < n % class_count))
            .collect();
        Self { counts }
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn present(&self, class: usize) -> bool {
        self.counts[class] > 0
    }
}

/// Expected effect of one instance of a label on its gradient component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpactEstimate {
    pub m: f64,
    pub source: ImpactSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpactSource {
    /// The untrained-model prior `-1/N`.
    UntrainedPrior,
    /// Estimated from the observed gradient's negative components.
    Empirical,
    /// Estimated from dummy probe batches on the model snapshot.
    DummyProbe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Llbg,
    Ebi,
    Llg,
    LlgStar,
    Ilrg,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::Llbg,
        AttackKind::Ebi,
        AttackKind::Llg,
        AttackKind::LlgStar,
        AttackKind::Ilrg,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Llbg => "llbg",
            AttackKind::Ebi => "ebi",
            AttackKind::Llg => "llg",
            AttackKind::LlgStar => "llg_star",
            AttackKind::Ilrg => "ilrg",
        }
    }

    /// Bias-based attacks read `bias_grad`; weight-based attacks read
    /// `weight_grad` row sums.
    pub fn is_bias_based(&self) -> bool {
        matches!(self, AttackKind::Llbg | AttackKind::Ebi | AttackKind::Ilrg)
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "llbg" => Ok(AttackKind::Llbg),
            "ebi" => Ok(AttackKind::Ebi),
            "llg" => Ok(AttackKind::Llg),
            "llg_star" | "llg*" => Ok(AttackKind::LlgStar),
            "ilrg" => Ok(AttackKind::Ilrg),
            other => Err(Error::Config(format!("unknown attack {other:?}"))),
        }
    }
}

/// Solver and decoding details attached to a reconstruction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttackDiagnostics {
    /// Classes treated as certainly present (phase 1 of the greedy decode).
    pub phase1: Vec<usize>,
    /// Least-squares residual, for the equation-solving attack.
    pub residual: Option<f64>,
    /// Set when the attack had to fall back from its primary estimator.
    pub fallback: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub attack: AttackKind,
    pub reconstruction: LabelHistogram,
    pub impact: Option<ImpactEstimate>,
    pub diagnostics: AttackDiagnostics,
}

/// Two-phase greedy decoding shared by the heuristic attacks.
///
/// Phase 1 assigns one count to every class flagged present and subtracts
/// `m` from its score (raising it, since `m < 0`). Phase 2 repeatedly assigns
/// to the minimum score, subtracting `m` each time, until `n` counts are
/// placed. Ties always break toward the lowest class index. If more classes
/// are flagged than there are slots, the most negative scores win.
pub fn greedy_decode(
    scores: &[f64],
    m: &ImpactEstimate,
    n: usize,
    phase1: &[bool],
) -> Result<LabelHistogram> {
    if scores.len() != phase1.len() {
        return Err(Error::Size(format!(
            "{} scores vs {} phase-1 flags",
            scores.len(),
            phase1.len()
        )));
    }
    if n == 0 {
        return Ok(LabelHistogram::zeros(scores.len()));
    }
    if m.m >= 0.0 || !m.m.is_finite() {
        return Err(Error::Domain(format!(
            "impact estimate must be negative, got {}",
            m.m
        )));
    }

    let mut scores = scores.to_vec();
    let mut counts = vec![0usize; scores.len()];
    let mut total = 0usize;

    let mut flagged: Vec<usize> = (0..scores.len()).filter(|&i| phase1[i]).collect();
    flagged.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores").then(a.cmp(&b)));
    for &class in flagged.iter().take(n) {
        counts[class] += 1;
        scores[class] -= m.m;
        total += 1;
    }

    while total < n {
        let class = argmin(&scores);
        counts[class] += 1;
        scores[class] -= m.m;
        total += 1;
    }
    Ok(LabelHistogram::from_counts(counts))
}

fn argmin(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s < scores[best] {
            best = i;
        }
    }
    best
}

fn require_bias<'u>(update: &'u GradientUpdate, attack: AttackKind) -> Result<&'u [f64]> {
    update.bias_grad.as_deref().ok_or_else(|| Error::Capability {
        attack: attack.name().into(),
        reason: "update carries no bias gradient (model trained without final bias)".into(),
    })
}

/// LLBG: phase 1 marks every class with a negative bias component, then the
/// greedy decode runs with the untrained-model impact prior `m = -1/N`.
pub fn attack_llbg(update: &GradientUpdate) -> Result<AttackResult> {
    let bias = require_bias(update, AttackKind::Llbg)?;
    let n = update.declared_n;
    let impact = ImpactEstimate {
        m: -1.0 / n as f64,
        source: ImpactSource::UntrainedPrior,
    };
    let phase1: Vec<bool> = bias.iter().map(|&b| b < 0.0).collect();
    let reconstruction = greedy_decode(bias, &impact, n, &phase1)?;
    Ok(AttackResult {
        attack: AttackKind::Llbg,
        reconstruction,
        impact: Some(impact),
        diagnostics: AttackDiagnostics {
            phase1: flags_to_indices(&phase1),
            ..Default::default()
        },
    })
}

/// EBI: like LLBG but with the impact estimated empirically from the observed
/// bias gradient, `m = (1/N) * sum of negative components`.
pub fn attack_ebi(update: &GradientUpdate) -> Result<AttackResult> {
    let bias = require_bias(update, AttackKind::Ebi)?;
    let n = update.declared_n;
    let negative_sum: f64 = bias.iter().filter(|&&b| b < 0.0).sum();
    if negative_sum >= 0.0 {
        // Degenerate impact: nothing is marked present. Fall back to an even
        // spread rather than abort the sweep.
        return Ok(AttackResult {
            attack: AttackKind::Ebi,
            reconstruction: LabelHistogram::uniform(bias.len(), n),
            impact: None,
            diagnostics: AttackDiagnostics {
                fallback: Some("no negative bias component; uniform histogram".into()),
                ..Default::default()
            },
        });
    }
    let impact = ImpactEstimate {
        m: negative_sum / n as f64,
        source: ImpactSource::Empirical,
    };
    let phase1: Vec<bool> = bias.iter().map(|&b| b < 0.0).collect();
    let reconstruction = greedy_decode(bias, &impact, n, &phase1)?;
    Ok(AttackResult {
        attack: AttackKind::Ebi,
        reconstruction,
        impact: Some(impact),
        diagnostics: AttackDiagnostics {
            phase1: flags_to_indices(&phase1),
            ..Default::default()
        },
    })
}

fn llg_scores(update: &GradientUpdate) -> Vec<f64> {
    update.weight_grad.row_sums()
}

fn llg_impact(scores: &[f64], n: usize) -> Option<ImpactEstimate> {
    let negative_sum: f64 = scores.iter().filter(|&&g| g < 0.0).sum();
    (negative_sum < 0.0).then_some(ImpactEstimate {
        m: negative_sum / n as f64,
        source: ImpactSource::Empirical,
    })
}

/// LLG: the weight-based analogue. Scores are the per-class row sums of the
/// weight gradient; a negative row sum marks the class present.
pub fn attack_llg(update: &GradientUpdate) -> Result<AttackResult> {
    let scores = llg_scores(update);
    if scores.iter().all(|&g| g == 0.0) {
        return Err(Error::Numeric(
            "llg: weight gradient is identically zero".into(),
        ));
    }
    let impact = llg_impact(&scores, update.declared_n).ok_or_else(|| {
        Error::Numeric("llg: no negative weight-gradient row sum to estimate impact from".into())
    })?;
    let phase1: Vec<bool> = scores.iter().map(|&g| g < 0.0).collect();
    let reconstruction = greedy_decode(&scores, &impact, update.declared_n, &phase1)?;
    Ok(AttackResult {
        attack: AttackKind::Llg,
        reconstruction,
        impact: Some(impact),
        diagnostics: AttackDiagnostics {
            phase1: flags_to_indices(&phase1),
            ..Default::default()
        },
    })
}

/// LLG*: white-box variant. The impact is estimated from dummy batches run
/// through the model snapshot: each probe draws standard-normal inputs with
/// uniformly drawn labels, and the per-instance effect is the least-squares
/// slope of weight-gradient row sums against per-class label counts, scaled
/// by `(K-1)/K` to isolate the effect of a single added instance.
pub fn attack_llg_star(
    update: &GradientUpdate,
    model: &Model,
    rng: &mut SeededRng,
    probes: usize,
) -> Result<AttackResult> {
    let scores = llg_scores(update);
    if scores.iter().all(|&g| g == 0.0) {
        return Err(Error::Numeric(
            "llg*: weight gradient is identically zero".into(),
        ));
    }
    let n = update.declared_n;
    let k = model.class_count();
    let input_dim = model.arch().input_dim;

    let mut slope_num = 0.0;
    let mut slope_den = 0.0;
    for _ in 0..probes {
        let features: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..input_dim).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let probe = model.last_layer_gradients(&features, &labels)?;
        let row_sums = probe.weight_grad.row_sums();
        let histogram = LabelHistogram::from_labels(&labels, k)?;

        let mean_count = n as f64 / k as f64;
        let mean_g = row_sums.iter().sum::<f64>() / k as f64;
        for (i, &g) in row_sums.iter().enumerate() {
            let dl = histogram.counts()[i] as f64 - mean_count;
            slope_num += dl * (g - mean_g);
            slope_den += dl * dl;
        }
    }

    let probe_m = (slope_den > 0.0).then(|| slope_num / slope_den * (1.0 - 1.0 / k as f64));
    let (impact, fallback) = match probe_m {
        Some(m) if m < 0.0 => (
            ImpactEstimate {
                m,
                source: ImpactSource::DummyProbe,
            },
            None,
        ),
        _ => {
            let reason = if probes == 0 {
                "no probes requested; using the empirical llg estimator".to_string()
            } else {
                "probe estimate was not negative; using the empirical llg estimator".to_string()
            };
            let impact = llg_impact(&scores, n).ok_or_else(|| {
                Error::Numeric(
                    "llg*: neither probes nor observed gradients give a negative impact".into(),
                )
            })?;
            (impact, Some(reason))
        }
    };

    let phase1: Vec<bool> = scores.iter().map(|&g| g < 0.0).collect();
    let reconstruction = greedy_decode(&scores, &impact, n, &phase1)?;
    Ok(AttackResult {
        attack: AttackKind::LlgStar,
        reconstruction,
        impact: Some(impact),
        diagnostics: AttackDiagnostics {
            phase1: flags_to_indices(&phase1),
            fallback,
            ..Default::default()
        },
    })
}

/// iLRG: recover per-class mean penultimate features from weight/bias
/// gradient ratios, push them through the snapshot's final layer to get
/// per-class probability vectors, then solve `sum_k lambda_k p(k) - lambda =
/// N * bias_grad` for the counts by nonnegative least squares.
pub fn attack_ilrg(
    update: &GradientUpdate,
    final_weight: &Matrix,
    final_bias: &[f64],
) -> Result<AttackResult> {
    let bias = require_bias(update, AttackKind::Ilrg)?;
    let k = update.class_count();
    let n = update.declared_n;
    if final_weight.rows() != k
        || final_weight.cols() != update.weight_grad.cols()
        || final_bias.len() != k
    {
        return Err(Error::Size(
            "ilrg: snapshot final layer does not match the update shapes".into(),
        ));
    }

    let valid: Vec<usize> = (0..k).filter(|&i| bias[i].abs() > ILRG_BIAS_EPS).collect();
    if valid.is_empty() {
        return Err(Error::Numeric(
            "ilrg: bias gradient is zero everywhere; feature recovery impossible".into(),
        ));
    }

    // Per-class mean penultimate features from the gradient ratio. Classes
    // with a near-zero bias component get the mean of the recovered features
    // so their unknown stays in the system.
    let dim = update.weight_grad.cols();
    let mut features: Vec<Option<Vec<f64>>> = vec![None; k];
    let mut mean_feature = vec![0.0; dim];
    for &i in &valid {
        let row: Vec<f64> = update.weight_grad.row(i).iter().map(|w| w / bias[i]).collect();
        for (m, v) in mean_feature.iter_mut().zip(&row) {
            *m += v / valid.len() as f64;
        }
        features[i] = Some(row);
    }

    // Column k of the system is the probability vector of class k's mean
    // feature under the snapshot, minus the unit vector.
    let mut system = Matrix::zeros(k, k);
    for class in 0..k {
        let feature = features[class].as_ref().unwrap_or(&mean_feature);
        let mut logits = final_weight.matvec(feature)?;
        for (l, b) in logits.iter_mut().zip(final_bias) {
            *l += b;
        }
        let probs = softmax(&logits)?;
        for i in 0..k {
            let delta = if i == class { 1.0 } else { 0.0 };
            system.set(i, class, probs[i] - delta);
        }
    }
    let rhs: Vec<f64> = bias.iter().map(|b| b * n as f64).collect();
    let solution = solve_nonneg_least_squares(&system, &rhs)?;

    let total: f64 = solution.x.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numeric(
            "ilrg: least-squares solution is identically zero".into(),
        ));
    }
    let counts = largest_remainder_round(&solution.x, n);
    Ok(AttackResult {
        attack: AttackKind::Ilrg,
        reconstruction: LabelHistogram::from_counts(counts),
        impact: None,
        diagnostics: AttackDiagnostics {
            residual: Some(solution.residual),
            ..Default::default()
        },
    })
}

/// Scale nonnegative weights so they sum to `n` and round to integers with
/// the largest-remainder rule (ties toward the lowest index).
fn largest_remainder_round(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
    let mut counts: Vec<usize> = scaled.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - scaled[a].floor();
        let fb = scaled[b] - scaled[b].floor();
        fb.partial_cmp(&fa).expect("finite remainders").then(a.cmp(&b))
    });
    for &class in order.iter().take(n.saturating_sub(assigned)) {
        counts[class] += 1;
    }
    counts
}

fn flags_to_indices(flags: &[bool]) -> Vec<usize> {
    flags
        .iter()
        .enumerate()
        .filter_map(|(i, &f)| f.then_some(i))
        .collect()
}
