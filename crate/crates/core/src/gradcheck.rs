//! Central finite-difference verification of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_split, Batch, Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::model::{FrozenTargets, LossTerms, LossWeights, Model, ModelConfig};
use crate::nn::Ctx;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub probes: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// One-sided slopes disagreeing by more than this fraction mark a kink.
    pub kink_tolerance: f64,
    /// Probes where both gradients are below this are uninformative.
    pub negligible: f64,
    pub max_draws: usize,
    /// Training samples in the checked batch.
    pub samples: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            probes: 20,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            kink_tolerance: 1e-3,
            negligible: 1e-7,
            max_draws: 2000,
            samples: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub param: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: String,
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
    pub kink_redraws: usize,
    pub negligible_redraws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub terms: Vec<TermCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms
            .iter()
            .all(|t| t.probes.len() > 0 && t.max_rel_error < self.tolerance)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Value of one loss term with proposals and targets held fixed.
fn term_value(
    model: &Model,
    store: &ParamStore<f64>,
    batch: &Batch,
    lambda: LossWeights,
    frozen: &FrozenTargets,
    term: &str,
) -> Result<f64> {
    let mut ctx = Ctx::new(store);
    let (terms, _) = model.loss_with_targets(&mut ctx, batch, lambda, Some(frozen))?;
    Ok(ctx.tape.scalar(terms.get(term)))
}

/// Checks every loss term (class, reg, align, boundary, total) on random
/// scalar parameters in double precision.
pub fn gradient_check(
    model: &Model,
    store: &ParamStore<f64>,
    batch: &Batch,
    lambda: LossWeights,
    config: &GradcheckConfig,
) -> Result<GradcheckReport> {
    if config.probes == 0 || !(config.step > 0.0) {
        return Err(Error::Config("gradient check needs probes and a positive step".into()));
    }
    let mut ctx = Ctx::new(store);
    let (terms, frozen) = model.loss_with_targets(&mut ctx, batch, lambda, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work = store.clone();
    let mut out = Vec::with_capacity(LossTerms::NAMES.len());
    for term in LossTerms::NAMES {
        let grads = ctx.tape.backward(terms.get(term)).params(store.len());
        let f0 = ctx.tape.scalar(terms.get(term));
        // Scalars of every tensor the term reaches, drawn uniformly.
        let reached: Vec<(ParamId, usize)> = store
            .ids()
            .filter(|id| grads[id.index()].is_some())
            .map(|id| (id, store.get(id).len()))
            .collect();
        let total: usize = reached.iter().map(|r| r.1).sum();
        if total == 0 {
            return Err(Error::Validation(format!("term {term} reaches no parameter")));
        }
        let mut check = TermCheck {
            term: term.to_string(),
            max_rel_error: 0.0,
            probes: Vec::with_capacity(config.probes),
            kink_redraws: 0,
            negligible_redraws: 0,
        };
        let mut draws = 0;
        while check.probes.len() < config.probes {
            draws += 1;
            if draws > config.max_draws {
                return Err(Error::Validation(format!(
                    "term {term}: only {} usable probes after {} draws",
                    check.probes.len(),
                    config.max_draws
                )));
            }
            let mut k = rng.gen_range(0..total);
            let (id, _) = *reached
                .iter()
                .find(|r| {
                    if k < r.1 {
                        true
                    } else {
                        k -= r.1;
                        false
                    }
                })
                .expect("index within total");
            let cols = store.get(id).ncols();
            let index = (k / cols, k % cols);
            let analytic = grads[id.index()].as_ref().expect("reached")[[index.0, index.1]];

            let orig = store.get(id)[[index.0, index.1]];
            let h = config.step;
            work.get_mut(id)[[index.0, index.1]] = orig + h;
            let fp = term_value(model, &work, batch, lambda, &frozen, term)?;
            work.get_mut(id)[[index.0, index.1]] = orig - h;
            let fm = term_value(model, &work, batch, lambda, &frozen, term)?;
            work.get_mut(id)[[index.0, index.1]] = orig;

            let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
            let numeric = (fp - fm) / (2.0 * h);
            if (right - left).abs() > config.kink_tolerance * right.abs().max(left.abs()).max(config.negligible) {
                check.kink_redraws += 1;
                continue;
            }
            if analytic.abs() < config.negligible && numeric.abs() < config.negligible {
                check.negligible_redraws += 1;
                continue;
            }
            let rel = relative_error(analytic, numeric);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.probes.push(Probe {
                param: store.name(id).to_string(),
                index,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
        log::info!(
            "gradcheck {term}: max rel err {:.3e} ({} kink, {} negligible redraws)",
            check.max_rel_error,
            check.kink_redraws,
            check.negligible_redraws
        );
        out.push(check);
    }
    Ok(GradcheckReport {
        tolerance: config.tolerance,
        terms: out,
    })
}

/// Check on a fresh double-precision model and the first `config.samples`
/// training samples.
pub fn check_fresh_model(
    model_config: &ModelConfig,
    seed: u64,
    synthetic: &SyntheticConfig,
    lambda: LossWeights,
    config: &GradcheckConfig,
) -> Result<GradcheckReport> {
    if config.samples == 0 {
        return Err(Error::Config("gradient check needs at least one sample".into()));
    }
    let (model, store) = Model::new::<f64>(model_config.clone(), seed)?;
    let samples = generate_split(synthetic, Split::Train, config.samples)?;
    let batch = Batch::from_samples(&samples.iter().collect::<Vec<_>>())?;
    gradient_check(&model, &store, &batch, lambda, config)
}
