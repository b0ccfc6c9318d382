//! Central finite-difference checks of analytic parameter gradients.

use crate::nn::Parameters;

/// Outcome of one [`check_parameters`] run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_relative_error: f64,
    /// Name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_relative_error <= tolerance
    }
}

/// `|a - n| / max(|a|, |n|)`, or 0 when both are below `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares analytic gradients to central differences on up to `per_param`
/// evenly spaced coordinates of every parameter whose name passes `select`.
///
/// `loss(model, backward)` must return the scalar loss and, when `backward`
/// is set, accumulate its gradient into the model.
pub fn check_parameters<M: Parameters<f64>>(
    model: &mut M,
    select: impl Fn(&str) -> bool,
    per_param: usize,
    eps: f64,
    mut loss: impl FnMut(&mut M, bool) -> f64,
) -> GradCheck {
    model.zero_grad();
    loss(model, true);
    let mut targets: Vec<(String, usize, f64)> = Vec::new();
    model.visit("", &mut |name, p| {
        if !select(name) || p.is_empty() {
            return;
        }
        let n = p.len();
        let count = per_param.min(n);
        for j in 0..count {
            let idx = j * n / count;
            targets.push((name.to_string(), idx, p.grad[idx]));
        }
    });
    let mut report = GradCheck::default();
    for (name, idx, analytic) in targets {
        let original = set_value(model, &name, idx, None);
        set_value(model, &name, idx, Some(original + eps));
        let up = loss(model, false);
        set_value(model, &name, idx, Some(original - eps));
        let down = loss(model, false);
        set_value(model, &name, idx, Some(original));
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(analytic, numeric, 1e-7);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some((name.clone(), idx));
        }
    }
    report
}

/// Returns the old value of a coordinate, overwriting it when `new` is given.
fn set_value<M: Parameters<f64>>(model: &mut M, name: &str, idx: usize, new: Option<f64>) -> f64 {
    let mut old = f64::NAN;
    model.visit_mut("", &mut |n, p| {
        if n == name {
            old = p.value[idx];
            if let Some(v) = new {
                p.value[idx] = v;
            }
        }
    });
    old
}
