//! Central-difference gradient verification.

use crate::rng::SbRng;
use crate::tensor::Tensor4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error seen (absolute where both sides are tiny).
    pub max_err: f64,
    /// (tensor index, flat element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// How many coordinates were probed.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_err <= tol && self.checked > 0
    }
}

/// Compare analytic gradients of a scalar function against central
/// differences. `f` is evaluated on perturbed copies of `inputs`; `analytic`
/// must hold one gradient tensor per input, same shapes. Tensors larger
/// than `max_coords` get that many randomly sampled coordinates; smaller
/// ones are checked exhaustively. Errors are relative once either side is
/// above 1e-7, absolute below that.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[Tensor4]) -> f64,
    inputs: &[Tensor4],
    analytic: &[Tensor4],
    step: f64,
    max_coords: usize,
    rng: &mut SbRng,
) -> GradCheckReport {
    assert_eq!(inputs.len(), analytic.len(), "one gradient per input");
    let mut report = GradCheckReport { max_err: 0.0, worst: None, checked: 0 };
    let mut work: Vec<Tensor4> = inputs.to_vec();
    for ti in 0..inputs.len() {
        assert_eq!(inputs[ti].shape(), analytic[ti].shape(), "gradient shape");
        let n = inputs[ti].shape().elems();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            // Sample without replacement from a shuffled index list.
            let mut ix: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut ix);
            ix.truncate(max_coords);
            ix
        };
        for &ci in &coords {
            let orig = inputs[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + step;
            let fp = f(&work);
            work[ti].data_mut()[ci] = orig - step;
            let fm = f(&work);
            work[ti].data_mut()[ci] = orig;
            let num = (fp - fm) / (2.0 * step);
            let ana = analytic[ti].data()[ci];
            let scale = num.abs().max(ana.abs());
            let err = if scale < 1e-7 { (num - ana).abs() } else { (num - ana).abs() / scale };
            report.checked += 1;
            if err > report.max_err {
                report.max_err = err;
                report.worst = Some((ti, ci));
            }
        }
    }
    report
}
