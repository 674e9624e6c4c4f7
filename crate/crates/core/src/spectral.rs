//! Direct DFT utilities and a Fourier-layer operator on uniform grids.
//!
//! A layer maps `v (n x n_v)` to
//!
//! ```text
//! sigma(v W + b + Re IDFT(R_k F_k(v)))
//! ```
//!
//! where `F_k` is the DFT of each channel at signed frequency `k`,
//! `|k| <= m_max`, and `R_k` is a learned complex `n_v x n_v` matrix. Modes
//! outside the band are dropped. Transforms are direct `O(n^2)` sums.

use std::f64::consts::PI;
use std::rc::Rc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_raw, ParamStore, ParamVars, Tape, Tensor, Twiddles, Var};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::gkn::Activation;
use crate::grid::{relative_l2, Domain1D, ScalarField1D};
use crate::ls::{solve_full_field, ReferenceMedium, StiffnessField, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::train::{fit, relative_loss, EpochRecord, TrainConfig};

fn transform(values: &[Complex64], sign: f64) -> Vec<Complex64> {
    let n = values.len();
    let tw: Vec<Complex64> = (0..n)
        .map(|j| Complex64::from_polar(1.0, sign * 2.0 * PI * j as f64 / n as f64))
        .collect();
    (0..n)
        .map(|k| {
            values
                .iter()
                .enumerate()
                .map(|(x, v)| v * tw[(k * x) % n])
                .sum()
        })
        .collect()
}

/// `X_k = sum_x x_j exp(-2 pi i k j / n)`.
pub fn dft(values: &[Complex64]) -> Vec<Complex64> {
    transform(values, -1.0)
}

/// Inverse of [`dft`], including the `1/n` factor.
pub fn idft(spectrum: &[Complex64]) -> Vec<Complex64> {
    let n = spectrum.len() as f64;
    transform(spectrum, 1.0)
        .into_iter()
        .map(|v| v / n)
        .collect()
}

/// `(f * g)_i = sum_j f_j g_{(i - j) mod n}`.
pub fn circular_convolve(f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    if f.len() != g.len() {
        return invalid(format!("lengths {} and {} differ", f.len(), g.len()));
    }
    let n = f.len();
    Ok((0..n)
        .map(|i| (0..n).map(|j| f[j] * g[(i + n - j) % n]).sum())
        .collect())
}

/// Signed frequencies `-m..=m`.
pub fn band(m_max: usize) -> Vec<i64> {
    let m = m_max as i64;
    (-m..=m).collect()
}

pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FnoConfig {
    pub n_v: usize,
    pub layers: usize,
    pub m_max: usize,
    pub activation: Activation,
}

impl Default for FnoConfig {
    fn default() -> Self {
        Self {
            n_v: 16,
            layers: 4,
            m_max: 16,
            activation: Activation::Tanh,
        }
    }
}

impl FnoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_v == 0 || self.layers == 0 || self.m_max == 0 {
            return invalid("n_v, layers and m_max must be positive");
        }
        Ok(())
    }

    pub fn modes(&self) -> usize {
        2 * self.m_max + 1
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let nv = self.n_v;
        let mut out = vec![
            ("lift.w".to_string(), vec![INPUT_CHANNELS, nv]),
            ("lift.b".to_string(), vec![nv]),
        ];
        for t in 0..self.layers {
            out.push((format!("layer{t}.spectral"), vec![self.modes(), nv, nv, 2]));
            out.push((format!("layer{t}.w"), vec![nv, nv]));
            out.push((format!("layer{t}.b"), vec![nv]));
        }
        out.push(("proj.w".into(), vec![nv, 1]));
        out.push(("proj.b".into(), vec![1]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FnoModel {
    config: FnoConfig,
    params: ParamStore,
    freqs: Vec<i64>,
}

#[derive(Serialize, Deserialize)]
struct FnoFile {
    kind: String,
    architecture: FnoConfig,
    checkpoint: serde_json::Value,
}

impl FnoModel {
    /// Spectral weights are drawn per frequency from a stream keyed by
    /// `(seed, k)`, so models with a wider band share their low modes with
    /// narrower ones.
    pub fn init(config: FnoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nv = config.n_v;
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let len: usize = shape.iter().product();
            let data = if name.ends_with(".spectral") {
                let layer: u64 = name["layer".len()..name.len() - ".spectral".len()]
                    .parse()
                    .expect("layer index");
                let scale = 1.0 / nv as f64;
                band(config.m_max)
                    .iter()
                    .flat_map(|&k| {
                        let key = seed
                            ^ (layer << 40)
                            ^ ((k + (1 << 20)) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                        let mut r = ChaCha8Rng::seed_from_u64(key);
                        (0..nv * nv * 2).map(move |_| r.random_range(-scale..scale))
                    })
                    .collect()
            } else if shape.len() == 2 {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..len).map(|_| rng.random_range(-a..a)).collect()
            } else {
                vec![0.0; len]
            };
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: FnoConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return invalid(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            ));
        }
        let mut ordered = ParamStore::new();
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
            if shape.as_slice() != t.shape() {
                return invalid(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                ));
            }
            ordered.insert(name.clone(), t.clone())?;
        }
        let freqs = band(config.m_max);
        Ok(Self {
            config,
            params: ordered,
            freqs,
        })
    }

    pub fn config(&self) -> &FnoConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&FnoFile {
            kind: "fno".into(),
            architecture: self.config.clone(),
            checkpoint: self.params.to_value()?,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: FnoFile = serde_json::from_str(s)?;
        if f.kind != "fno" {
            return invalid(format!("checkpoint holds a {} model, not fno", f.kind));
        }
        Self::from_parts(f.architecture, ParamStore::from_value(f.checkpoint)?)
    }
}

/// Full-field sample: stiffness on a uniform grid, applied strain and the
/// resulting strain field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub domain: Domain1D,
    pub stiffness: Vec<f64>,
    pub eps_macro: f64,
    pub target: Vec<f64>,
}

impl FieldSample {
    pub fn new(
        domain: Domain1D,
        stiffness: Vec<f64>,
        eps_macro: f64,
        target: Vec<f64>,
    ) -> Result<Self> {
        if stiffness.len() < 2 || stiffness.len() != target.len() {
            return invalid(format!(
                "{} stiffness values with {} targets",
                stiffness.len(),
                target.len()
            ));
        }
        if !stiffness.iter().chain(&target).all(|v| v.is_finite()) || !eps_macro.is_finite() {
            return invalid("sample values must be finite");
        }
        Ok(Self {
            domain,
            stiffness,
            eps_macro,
            target,
        })
    }

    /// Fixed-point full-field solve at `eps_macro`.
    pub fn from_full_field(c: &StiffnessField, eps_macro: f64) -> Result<Self> {
        let reference = ReferenceMedium::midrange(c);
        let sol = solve_full_field(c, eps_macro, &reference, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        Self::new(
            c.grid().domain(),
            c.values().to_vec(),
            eps_macro,
            sol.strain.into_values(),
        )
    }

    pub fn n(&self) -> usize {
        self.stiffness.len()
    }

    /// `n x 3` channels `(s, eps0, C)` at cell centers, `s` normalized to `[0, 1]`.
    pub fn inputs(&self) -> Tensor {
        let n = self.n();
        let dx = self.domain.length() / n as f64;
        let data = (0..n)
            .flat_map(|i| {
                let x = self.domain.a() + (i as f64 + 0.5) * dx;
                [self.domain.normalize(x), self.eps_macro, self.stiffness[i]]
            })
            .collect();
        Tensor::matrix(n, INPUT_CHANNELS, data).expect("input shape")
    }
}

/// Recorded forward pass from an `n x 3` input to the `n x 1` strain.
pub fn spectral_forward_recorded<'t>(
    model: &FnoModel,
    pv: &ParamVars<'t>,
    tape: &'t Tape,
    inputs: &Tensor,
) -> Result<Var<'t>> {
    let cfg = &model.config;
    let n = match inputs.shape() {
        [n, c] if *c == INPUT_CHANNELS => *n,
        s => return invalid(format!("expected an n x {INPUT_CHANNELS} input, got {s:?}")),
    };
    check_grid(model, n)?;
    let freqs = Rc::new(model.freqs.clone());
    let mut v = tape
        .constant(inputs.clone())
        .matmul(pv.get("lift.w")?)?
        .add_row(pv.get("lift.b")?)?;
    for t in 0..cfg.layers {
        let spec = v.dft_modes(freqs.clone())?;
        let mixed = pv.get(&format!("layer{t}.spectral"))?.mode_mix(spec)?;
        let global = mixed.idft_modes_real(freqs.clone(), n)?;
        let local = v
            .matmul(pv.get(&format!("layer{t}.w"))?)?
            .add_row(pv.get(&format!("layer{t}.b"))?)?;
        v = cfg.activation.apply(local.add(global)?);
    }
    v.matmul(pv.get("proj.w")?)?.add_row(pv.get("proj.b")?)
}

fn check_grid(model: &FnoModel, n: usize) -> Result<()> {
    if n < 2 * model.config.m_max {
        return invalid(format!(
            "grid size {n} is below 2 m_max = {}",
            2 * model.config.m_max
        ));
    }
    Ok(())
}

/// Tape-free forward pass; bit-identical to the recorded one.
pub fn predict_fno(model: &FnoModel, sample: &FieldSample) -> Result<ScalarField1D> {
    let n = sample.n();
    check_grid(model, n)?;
    let cfg = &model.config;
    let nv = cfg.n_v;
    let p = |name: &str| model.params.get(name).expect("validated parameter").data();
    let add_row = |v: &mut [f64], b: &[f64]| {
        v.chunks_mut(b.len())
            .for_each(|r| r.iter_mut().zip(b).for_each(|(x, y)| *x += y))
    };
    let tw = Twiddles::new(n);
    let modes = model.freqs.len();

    let mut v = matmul_raw(sample.inputs().data(), p("lift.w"), n, INPUT_CHANNELS, nv);
    add_row(&mut v, p("lift.b"));
    for t in 0..cfg.layers {
        let mut spec = vec![0.0; modes * nv * 2];
        for (m, &k) in model.freqs.iter().enumerate() {
            for x in 0..n {
                let (cs, sn) = tw.at(k, x);
                for c in 0..nv {
                    spec[2 * (m * nv + c)] += v[x * nv + c] * cs;
                    spec[2 * (m * nv + c) + 1] -= v[x * nv + c] * sn;
                }
            }
        }
        let w = p(&format!("layer{t}.spectral"));
        let mut mixed = vec![0.0; modes * nv * 2];
        for m in 0..modes {
            for o in 0..nv {
                let (mut re, mut im) = (0.0, 0.0);
                for i in 0..nv {
                    let wi = 2 * ((m * nv + o) * nv + i);
                    let fi = 2 * (m * nv + i);
                    re += w[wi] * spec[fi] - w[wi + 1] * spec[fi + 1];
                    im += w[wi] * spec[fi + 1] + w[wi + 1] * spec[fi];
                }
                mixed[2 * (m * nv + o)] = re;
                mixed[2 * (m * nv + o) + 1] = im;
            }
        }
        let inv_n = 1.0 / n as f64;
        let mut global = vec![0.0; n * nv];
        for (m, &k) in model.freqs.iter().enumerate() {
            for x in 0..n {
                let (cs, sn) = tw.at(k, x);
                for c in 0..nv {
                    let (gr, gi) = (mixed[2 * (m * nv + c)], mixed[2 * (m * nv + c) + 1]);
                    global[x * nv + c] += (gr * cs - gi * sn) * inv_n;
                }
            }
        }
        let mut local = matmul_raw(&v, p(&format!("layer{t}.w")), n, nv, nv);
        add_row(&mut local, p(&format!("layer{t}.b")));
        v = local
            .iter()
            .zip(&global)
            .map(|(a, b)| cfg.activation.eval(a + b))
            .collect();
    }
    let mut out = matmul_raw(&v, p("proj.w"), n, nv, 1);
    add_row(&mut out, p("proj.b"));
    ScalarField1D::new(crate::grid::Grid1D::uniform(sample.domain, n)?, out)
}

/// Predicted strain field through the recorded graph.
pub fn spectral_forward(model: &FnoModel, sample: &FieldSample) -> Result<ScalarField1D> {
    let tape = Tape::new();
    let pv = tape.params(&model.params);
    let out = spectral_forward_recorded(model, &pv, &tape, &sample.inputs())?;
    let grid = crate::grid::Grid1D::uniform(sample.domain, sample.n())?;
    ScalarField1D::new(grid, out.value().data().to_vec())
}

pub fn evaluate_fno(model: &FnoModel, sample: &FieldSample) -> Result<f64> {
    if sample.target.iter().all(|&v| v == 0.0) {
        return invalid("reference has zero norm");
    }
    Ok(relative_l2(
        predict_fno(model, sample)?.values(),
        &sample.target,
    ))
}

/// Mean relative L2 error, samples evaluated independently under `exec`.
pub fn mean_relative_error_fno(
    model: &FnoModel,
    samples: &[FieldSample],
    exec: Exec,
) -> Result<f64> {
    if samples.is_empty() {
        return invalid("no samples");
    }
    let errs = exec
        .map_slice(samples, |s| evaluate_fno(model, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Training schedule for the full-field operator. Full-field datasets are
/// small (one sample per strain), so one epoch is a single Adam step at the
/// default batch size and the schedule runs longer than the graph model's.
pub fn default_fno_training() -> TrainConfig {
    TrainConfig {
        epochs: 600,
        lr_decay: 0.99,
        ..TrainConfig::default()
    }
}

pub fn train_fno(
    mut model: FnoModel,
    train: &[FieldSample],
    test: &[FieldSample],
    cfg: &TrainConfig,
) -> Result<(FnoModel, Vec<EpochRecord>)> {
    if let Some(s) = train.iter().chain(test).find(|s| s.n() != train[0].n()) {
        return invalid(format!(
            "all samples must share one grid size; found {} and {}",
            train[0].n(),
            s.n()
        ));
    }
    let inputs: Vec<Tensor> = train.iter().map(FieldSample::inputs).collect();
    let norms: Vec<f64> = train
        .iter()
        .map(|s| s.target.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if norms.contains(&0.0) {
        return invalid("training target has zero norm");
    }
    let mut params = model.params.clone();
    let history = fit(
        &mut params,
        train.len(),
        cfg,
        |tape, pv, i| {
            let pred = spectral_forward_recorded(&model, pv, tape, &inputs[i])?;
            relative_loss(tape, pred, &train[i].target, norms[i])
        },
        |params| {
            if test.is_empty() {
                return Ok(None);
            }
            let snapshot = FnoModel {
                params: params.clone(),
                ..model.clone()
            };
            mean_relative_error_fno(&snapshot, test, Exec::default()).map(Some)
        },
    )?;
    model.params = params;
    Ok((model, history))
}
