//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(parameter name, relative error)` per checked parameter.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f32,
    /// Coordinates sampled per parameter; `None` checks every coordinate.
    pub samples_per_param: Option<usize>,
    /// When set, each parameter is instead probed along this many random
    /// unit directions spanning the whole tensor. A directional difference
    /// collects signal from every coordinate at once, so it stays above
    /// float32 rounding on large models where single coordinates do not.
    pub directions: Option<usize>,
    pub seed: u64,
    /// Graphs are built in training mode with this dropout seed, so masks
    /// repeat across the perturbed evaluations.
    pub train: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-2,
            samples_per_param: None,
            directions: None,
            seed: 0,
            train: false,
        }
    }
}

/// Normwise relative error `|a - n| / max(|a|, |n|)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

enum Probe {
    Coord(usize),
    /// Unit vector over the whole tensor.
    Dir(Vec<f64>),
}

const LADDER: [f64; 6] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// Compares the backward pass of `build` against central differences for
/// every parameter in `params`. The objective is the sum of the output's
/// elements, accumulated in f64 on the numeric side.
///
/// Numeric derivatives come from a ladder of steps `step * 2^k` for
/// `k = -2..=3`. Adjacent rungs are combined by Richardson extrapolation,
/// which cancels the leading truncation term, and each parameter uses the
/// pair of consecutive extrapolations that agree best. Small steps drown in
/// float32 rounding and large ones in curvature, and where that balance
/// falls differs between parameters. The selection never looks at the
/// analytic gradient.
pub fn check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    cfg: &GradCheckConfig,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store, cfg.train, cfg.seed);
        let out = build(&mut g)?;
        Ok(g.value(out).data().iter().map(|&x| x as f64).sum())
    };
    let analytic = {
        let mut g = Graph::new(store, cfg.train, cfg.seed);
        let out = build(&mut g)?;
        let out = if g.value(out).numel() == 1 {
            out
        } else {
            g.sum(out)
        };
        g.backward(out)
    };
    let central = |store: &mut ParamStore, id: ParamId, probe: &Probe, step: f64| -> Result<f64> {
        let orig = store.value(id).data().to_vec();
        let at = |store: &mut ParamStore, sign: f64| -> Result<(f64, f64)> {
            let data = store.value_mut(id).data_mut();
            // realised displacement along the probe after rounding to f32
            let moved = match probe {
                Probe::Coord(c) => {
                    data[*c] = (orig[*c] as f64 + sign * step) as f32;
                    data[*c] as f64 - orig[*c] as f64
                }
                Probe::Dir(u) => {
                    for ((x, &o), &u) in data.iter_mut().zip(&orig).zip(u) {
                        *x = (o as f64 + sign * step * u) as f32;
                    }
                    sign * step
                }
            };
            let v = eval(store)?;
            store.value_mut(id).data_mut().copy_from_slice(&orig);
            Ok((v, moved))
        };
        let (plus, up) = at(store, 1.0)?;
        let (minus, down) = at(store, -1.0)?;
        Ok((plus - minus) / (up - down))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let mut per_param = Vec::new();
    for &id in params {
        let numel = store.value(id).numel();
        let grad = analytic
            .get(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; numel]);
        let probes: Vec<Probe> = match (cfg.directions, cfg.samples_per_param) {
            (Some(k), _) => (0..k)
                .map(|_| {
                    let mut u: Vec<f64> = (0..numel)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect();
                    let len = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                    u.iter_mut().for_each(|x| *x /= len);
                    Probe::Dir(u)
                })
                .collect(),
            (None, Some(k)) if k < numel => sample(&mut rng, numel, k)
                .into_iter()
                .map(Probe::Coord)
                .collect(),
            _ => (0..numel).map(Probe::Coord).collect(),
        };
        let a: Vec<f64> = probes
            .iter()
            .map(|p| match p {
                Probe::Coord(c) => grad[*c] as f64,
                Probe::Dir(u) => grad.iter().zip(u).map(|(&g, u)| g as f64 * u).sum(),
            })
            .collect();
        // rungs[k][j]: central difference for probe j at step LADDER[k]
        let mut rungs = Vec::with_capacity(LADDER.len());
        for m in LADDER {
            let h = cfg.step as f64 * m;
            rungs.push(
                probes
                    .iter()
                    .map(|p| central(store, id, p, h))
                    .collect::<Result<Vec<f64>>>()?,
            );
        }
        let extrapolated: Vec<Vec<f64>> = rungs
            .windows(2)
            .map(|w| {
                w[0].iter()
                    .zip(&w[1])
                    .map(|(f, c)| (4.0 * f - c) / 3.0)
                    .collect()
            })
            .collect();
        let best = extrapolated
            .windows(2)
            .map(|w| relative_error(&w[0], &w[1]))
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .map_or(0, |(k, _)| k);
        let n: Vec<f64> = extrapolated[best]
            .iter()
            .zip(&extrapolated[best + 1])
            .map(|(x, y)| (x + y) / 2.0)
            .collect();
        per_param.push((store.param(id).name.clone(), relative_error(&a, &n)));
    }
    Ok(GradCheckReport { per_param })
}
