//! Central finite differences against analytic parameter gradients.

use deskdrive_core::diffgraph::ParamBundle;
use rand::seq::SliceRandom;
use rand::Rng;

pub const STEP: f64 = 1e-5;

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Richardson-extrapolated central difference of `g` at zero offset.
fn derivative(mut g: impl FnMut(f64) -> f64) -> f64 {
    let d = |g: &mut dyn FnMut(f64) -> f64, h: f64| (g(h) - g(-h)) / (2.0 * h);
    let coarse = d(&mut g, STEP);
    let fine = d(&mut g, STEP / 2.0);
    (4.0 * fine - coarse) / 3.0
}

/// Largest relative error over `count` coordinates (mostly ones with a
/// non-zero analytic gradient) and one random direction. Components smaller
/// than `1e-5` of the objective's scale are compared on that scale.
pub fn check(
    params: &ParamBundle,
    analytic: &ParamBundle,
    f: impl Fn(&ParamBundle) -> f64,
    count: usize,
    rng: &mut impl Rng,
) -> f64 {
    let base = params.to_flat();
    let grad = analytic.to_flat();
    assert_eq!(base.len(), grad.len());
    let f0 = f(params);
    let floor = 1e-5 * f0.abs().max(1.0);
    let mut probe = params.clone();
    let mut eval = |flat: &[f64]| {
        probe.set_flat(flat).unwrap();
        f(&probe)
    };

    let nonzero: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
    let mut coords: Vec<usize> = nonzero.choose_multiple(rng, count.min(nonzero.len())).copied().collect();
    coords.extend((0..count / 4).map(|_| rng.gen_range(0..base.len())));

    let mut worst: f64 = 0.0;
    let mut x = base.clone();
    for &i in &coords {
        let numeric = derivative(|h| {
            x[i] = base[i] + h;
            let v = eval(&x);
            x[i] = base[i];
            v
        });
        worst = worst.max(rel_error(grad[i], numeric, floor));
    }

    let dir: Vec<f64> = (0..base.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    let numeric = derivative(|h| {
        let shifted: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + h * d / norm).collect();
        eval(&shifted)
    });
    let analytic_dir = grad.iter().zip(&dir).map(|(g, d)| g * d / norm).sum::<f64>();
    worst.max(rel_error(analytic_dir, numeric, floor))
}
