//! EDM noise schedules, classifier-free guidance and the stochastic samplers.
//!
//! Two interchangeable samplers are registered by name:
//!
//! * `edm` - the stochastic Karras sampler with churn, used as the unguided
//!   baseline;
//! * `restoration-guided` - the same trajectory where every denoised estimate
//!   is pulled towards the LQ latent with weight `k_t = (sigma_t/sigma_T)^tau_r`.
//!
//! Both draw the initial state and one churn noise tensor per step from the
//! caller's stream in the same order, so disabling guidance reproduces the
//! baseline bit for bit.

mod schedule;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::Zip;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, Prompt};
use crate::error::{Error, Result};
use crate::Latent;

pub use schedule::{karras_schedule, NoiseSchedule, ScheduleParams};

/// All knobs of the sampling loop and of CFG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub lambda_cfg: f64,
    pub tau_r: f64,
    pub s_churn: f64,
    pub s_noise: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub seed: u64,
    pub guidance_enabled: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lambda_cfg: 7.5,
            tau_r: 4.0,
            s_churn: 5.0,
            s_noise: 1.003,
            s_min: 0.05,
            s_max: 50.0,
            seed: 0,
            guidance_enabled: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.steps == 0 {
            return bad("T must be at least 1".into());
        }
        if !(self.lambda_cfg >= 0.0) {
            return bad(format!("lambda_cfg must be >= 0, got {}", self.lambda_cfg));
        }
        if !(self.tau_r >= 0.0) {
            return bad(format!("tau_r must be >= 0, got {}", self.tau_r));
        }
        if !(self.s_min <= self.s_max) {
            return bad(format!("s_min {} exceeds s_max {}", self.s_min, self.s_max));
        }
        if !(self.s_churn >= 0.0 && self.s_noise >= 0.0) {
            return bad("s_churn and s_noise must be >= 0".into());
        }
        Ok(())
    }

    /// The seeded stream a run with this config draws from.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Churn factor `gamma_t` for a level.
    pub fn churn(&self, sigma: f64) -> f64 {
        if sigma >= self.s_min && sigma <= self.s_max {
            (self.s_churn / self.steps as f64).min(std::f64::consts::SQRT_2 - 1.0)
        } else {
            0.0
        }
    }
}

/// Positive and (optional) negative prompts, one per batch item or a single
/// prompt broadcast over the batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Conditioning {
    pub positive: Vec<Prompt>,
    pub negative: Option<Vec<Prompt>>,
}

impl Conditioning {
    pub fn unconditional() -> Self {
        Self {
            positive: vec![Prompt::default()],
            negative: None,
        }
    }

    pub fn new(positive: Vec<Prompt>, negative: Option<Vec<Prompt>>) -> Self {
        Self { positive, negative }
    }
}

/// Where CFG fusion happens relative to restoration guidance. The guided
/// derivative is affine in the denoised estimate, so both orders agree up to
/// rounding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CfgOrder {
    #[default]
    BeforeGuidance,
    AfterGuidance,
}

/// `k_t = (sigma_t / sigma_T)^tau_r`.
pub fn guidance_weight(sigma_t: f64, sigma_big_t: f64, tau_r: f64) -> f64 {
    if tau_r == 0.0 {
        return 1.0;
    }
    (sigma_t / sigma_big_t).powf(tau_r)
}

/// `z_pos + lambda (z_pos - z_neg)`, elementwise.
pub fn cfg_fuse(z_pos: &Latent, z_neg: &Latent, lambda_cfg: f64) -> Result<Latent> {
    if z_pos.shape() != z_neg.shape() {
        return Err(Error::ShapeMismatch {
            expected: z_pos.shape().to_vec(),
            actual: z_neg.shape().to_vec(),
        });
    }
    if lambda_cfg == 0.0 {
        return Ok(z_pos.clone());
    }
    Ok(Zip::from(z_pos)
        .and(z_neg)
        .map_collect(|&p, &n| p + lambda_cfg * (p - n)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub sigma: f64,
    pub k_t: f64,
    pub mean_abs_z: f64,
}

/// Per-step diagnostics of one trajectory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    /// CSV `step,sigma,k_t,mean_abs_z`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        let mut write = || -> std::io::Result<()> {
            writeln!(out, "step,sigma,k_t,mean_abs_z")?;
            for r in &self.rows {
                writeln!(out, "{},{},{},{}", r.step, r.sigma, r.k_t, r.mean_abs_z)?;
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

/// Inputs shared by every sampler.
#[derive(Debug, Clone, Copy)]
pub struct SampleRequest<'a> {
    pub z_lq: &'a Latent,
    pub cond: &'a Conditioning,
    pub schedule: &'a NoiseSchedule,
}

/// A sampling strategy selectable by name.
pub trait Sampler: Send + Sync {
    fn name(&self) -> &'static str;

    fn sample(
        &self,
        denoiser: &dyn Denoiser,
        request: SampleRequest<'_>,
        config: &SamplerConfig,
        rng: &mut dyn RngCore,
        trace: Option<&mut Trace>,
    ) -> Result<Latent>;
}

/// Guidance applied inside the trajectory loop.
#[derive(Clone, Copy)]
enum Guidance {
    Off,
    Restoration { tau_r: f64, order: CfgOrder },
}

fn standard_normal_like(shape: &[usize], scale: f64, rng: &mut dyn RngCore) -> Latent {
    Latent::from_shape_simple_fn(shape, || scale * rng.sample::<f64, _>(StandardNormal))
}

fn check_finite(z: &Latent, step: usize, what: &str) -> Result<()> {
    if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step,
            what: format!("{what} contains {bad}"),
        });
    }
    Ok(())
}

fn evaluate(
    denoiser: &dyn Denoiser,
    z_hat: &Latent,
    z_lq: &Latent,
    sigma_hat: f64,
    prompts: &[Prompt],
    step: usize,
) -> Result<Latent> {
    let out = denoiser.denoise(z_hat, z_lq, sigma_hat, prompts)?;
    if out.shape() != z_hat.shape() {
        return Err(Error::ShapeMismatch {
            expected: z_hat.shape().to_vec(),
            actual: out.shape().to_vec(),
        });
    }
    check_finite(&out, step, "denoiser output")?;
    Ok(out)
}

fn run_trajectory(
    denoiser: &dyn Denoiser,
    request: SampleRequest<'_>,
    config: &SamplerConfig,
    guidance: Guidance,
    rng: &mut dyn RngCore,
    mut trace: Option<&mut Trace>,
) -> Result<Latent> {
    config.validate()?;
    let SampleRequest {
        z_lq,
        cond,
        schedule,
    } = request;
    if schedule.steps() != config.steps {
        return Err(Error::InvalidParameter(format!(
            "schedule has {} steps but T = {}",
            schedule.steps(),
            config.steps
        )));
    }
    let sigmas = schedule.sigmas();
    let sigma_big_t = schedule.sigma_start();
    let negative = cond
        .negative
        .as_deref()
        .filter(|_| config.lambda_cfg != 0.0);

    let mut z = standard_normal_like(z_lq.shape(), sigma_big_t, rng);
    for (i, pair) in sigmas.windows(2).enumerate() {
        let (sigma, sigma_next) = (pair[0], pair[1]);
        let t = config.steps - i;
        let eps = standard_normal_like(z.shape(), config.s_noise, rng);
        let gamma = config.churn(sigma);
        let sigma_hat = sigma + gamma * sigma;
        let churn_scale = (sigma_hat * sigma_hat - sigma * sigma).max(0.0).sqrt();
        let z_hat = if churn_scale > 0.0 {
            &z + &(eps * churn_scale)
        } else {
            z.clone()
        };

        let pos = evaluate(denoiser, &z_hat, z_lq, sigma_hat, &cond.positive, t)?;
        let neg = match negative {
            Some(prompts) => Some(evaluate(denoiser, &z_hat, z_lq, sigma_hat, prompts, t)?),
            None => None,
        };

        let (k, d) = match guidance {
            Guidance::Off => {
                let denoised = match &neg {
                    Some(n) => cfg_fuse(&pos, n, config.lambda_cfg)?,
                    None => pos,
                };
                (0.0, (&z_hat - &denoised) / sigma_hat)
            }
            Guidance::Restoration { tau_r, order } => {
                let k = guidance_weight(sigma, sigma_big_t, tau_r);
                let derivative = |denoised: &Latent| {
                    Zip::from(&z_hat)
                        .and(denoised)
                        .and(z_lq)
                        .map_collect(|&zh, &den, &lq| {
                            // k_t = 1 makes the guided target the LQ latent itself.
                            let target = if k == 1.0 { lq } else { den + k * (lq - den) };
                            (zh - target) / sigma_hat
                        })
                };
                let d = match (&neg, order) {
                    (None, _) => derivative(&pos),
                    (Some(n), CfgOrder::BeforeGuidance) => {
                        derivative(&cfg_fuse(&pos, n, config.lambda_cfg)?)
                    }
                    (Some(n), CfgOrder::AfterGuidance) => {
                        cfg_fuse(&derivative(&pos), &derivative(n), config.lambda_cfg)?
                    }
                };
                (k, d)
            }
        };

        z = &z_hat + &(d * (sigma_next - sigma_hat));
        check_finite(&z, t, "state")?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.rows.push(TraceRow {
                step: t,
                sigma,
                k_t: k,
                mean_abs_z: z.iter().map(|v| v.abs()).sum::<f64>() / z.len().max(1) as f64,
            });
        }
    }
    Ok(z)
}

/// Stochastic EDM sampler with churn and no restoration guidance.
pub fn edm_reference_sample(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    z_lq: &Latent,
    cond: &Conditioning,
    config: &SamplerConfig,
    rng: &mut dyn RngCore,
    trace: Option<&mut Trace>,
) -> Result<Latent> {
    let request = SampleRequest {
        z_lq,
        cond,
        schedule,
    };
    run_trajectory(denoiser, request, config, Guidance::Off, rng, trace)
}

/// Restoration-guided sampling. With `guidance_enabled = false` this is
/// exactly [`edm_reference_sample`].
#[allow(clippy::too_many_arguments)]
pub fn restoration_guided_sample(
    denoiser: &dyn Denoiser,
    z_lq: &Latent,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    order: CfgOrder,
    rng: &mut dyn RngCore,
    trace: Option<&mut Trace>,
) -> Result<Latent> {
    let guidance = if config.guidance_enabled {
        Guidance::Restoration {
            tau_r: config.tau_r,
            order,
        }
    } else {
        Guidance::Off
    };
    let request = SampleRequest {
        z_lq,
        cond,
        schedule,
    };
    run_trajectory(denoiser, request, config, guidance, rng, trace)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EdmSampler;

impl Sampler for EdmSampler {
    fn name(&self) -> &'static str {
        "edm"
    }

    fn sample(
        &self,
        denoiser: &dyn Denoiser,
        request: SampleRequest<'_>,
        config: &SamplerConfig,
        rng: &mut dyn RngCore,
        trace: Option<&mut Trace>,
    ) -> Result<Latent> {
        run_trajectory(denoiser, request, config, Guidance::Off, rng, trace)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RestorationGuidedSampler {
    pub cfg_order: CfgOrder,
}

impl Sampler for RestorationGuidedSampler {
    fn name(&self) -> &'static str {
        "restoration-guided"
    }

    fn sample(
        &self,
        denoiser: &dyn Denoiser,
        request: SampleRequest<'_>,
        config: &SamplerConfig,
        rng: &mut dyn RngCore,
        trace: Option<&mut Trace>,
    ) -> Result<Latent> {
        restoration_guided_sample(
            denoiser,
            request.z_lq,
            request.cond,
            request.schedule,
            config,
            self.cfg_order,
            rng,
            trace,
        )
    }
}

/// Samplers keyed by name.
#[derive(Clone)]
pub struct SamplerRegistry {
    samplers: BTreeMap<String, Arc<dyn Sampler>>,
}

impl Default for SamplerRegistry {
    fn default() -> Self {
        let mut reg = Self {
            samplers: BTreeMap::new(),
        };
        reg.register(Arc::new(EdmSampler));
        reg.register(Arc::new(RestorationGuidedSampler::default()));
        reg
    }
}

impl SamplerRegistry {
    pub fn register(&mut self, sampler: Arc<dyn Sampler>) {
        self.samplers.insert(sampler.name().to_string(), sampler);
    }

    pub fn names(&self) -> Vec<&str> {
        self.samplers.keys().map(String::as_str).collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Sampler>> {
        self.samplers.get(name).cloned().ok_or_else(|| Error::UnknownName {
            kind: "sampler",
            name: name.to_string(),
            valid: self.names().join(", "),
        })
    }
}
