//! Central finite-difference gradient checking.
//!
//! The numeric estimate only re-runs a caller-supplied forward closure, so it
//! stays independent of the reverse-mode path it is used to verify.

/// Central difference of `f` w.r.t. one scalar slot accessed through
/// `set`/`restore` semantics handled by the caller.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, at: f64, eps: f64) -> f64 {
    (f(at + eps) - f(at - eps)) / (2.0 * eps)
}

/// Relative error with an absolute floor, symmetric in its arguments.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_slope() {
        let d = central_diff(|x| x * x, 3.0, 1e-6);
        assert!(rel_err(d, 6.0) < 1e-8);
    }
}
