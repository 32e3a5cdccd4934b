//! Central finite-difference validation of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, ParamGrads, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter tensor among those with a nonzero
    /// analytic gradient.
    pub per_tensor: usize,
    /// Extra coordinates per tensor drawn uniformly from all of them.
    pub per_tensor_uniform: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            per_tensor: 48,
            per_tensor_uniform: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
    pub worst: Option<WorstCoordinate>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare `analytic` against central differences of `loss` around `params`.
///
/// `loss` must evaluate in high precision; `analytic` may come from a lower
/// precision run of the same model, cast up.
pub fn grad_check<F>(
    params: &ParamStore<f64>,
    analytic: &ParamGrads<f64>,
    loss: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&ParamStore<f64>) -> Result<f64, NumericsError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coordinates_checked: 0,
        worst: None,
    };

    for id in params.ids() {
        let n = params.get(id).len();
        let grad = analytic.get(id);
        let mut coords: Vec<usize> = match grad {
            Some(g) => {
                let mut nz: Vec<usize> = (0..n).filter(|&i| g.data()[i] != 0.0).collect();
                nz.shuffle(&mut rng);
                nz.truncate(opts.per_tensor);
                nz
            }
            None => Vec::new(),
        };
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        coords.extend(all.into_iter().take(opts.per_tensor_uniform));
        coords.sort_unstable();
        coords.dedup();

        for i in coords {
            let a = grad.map_or(0.0, |g| g.data()[i]);
            let num = central_difference(&mut probe, id, i, opts.step, &loss)?;
            let err = relative_error(a, num);
            report.coordinates_checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some(WorstCoordinate {
                    param: params.name(id).to_string(),
                    index: i,
                    analytic: a,
                    numeric: num,
                });
            }
        }
    }
    Ok(report)
}

fn central_difference<F>(probe: &mut ParamStore<f64>, id: ParamId, i: usize, h: f64, loss: &F) -> Result<f64, NumericsError>
where
    F: Fn(&ParamStore<f64>) -> Result<f64, NumericsError>,
{
    let orig = probe.get(id).data()[i];
    probe.get_mut(id).data_mut()[i] = orig + h;
    let plus = loss(probe);
    probe.get_mut(id).data_mut()[i] = orig - h;
    let minus = loss(probe);
    probe.get_mut(id).data_mut()[i] = orig;
    Ok((plus? - minus?) / (2.0 * h))
}

/// Gradient check of a scalar function built on a [`Tape`].
pub fn grad_check_tape<F>(params: &ParamStore<f64>, build: F, opts: &GradCheckOptions) -> Result<GradCheckReport, NumericsError>
where
    F: for<'p> Fn(&mut Tape<'p, f64>) -> Result<Var, NumericsError>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let out = build(&mut tape)?;
        tape.backward(out)?.into_param_grads()
    };
    grad_check(
        params,
        &analytic,
        |ps| {
            let mut tape = Tape::new(ps);
            let out = build(&mut tape)?;
            Ok(tape.value(out).data()[0])
        },
        opts,
    )
}
