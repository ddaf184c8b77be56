//! Dormand–Prince 5(4) for the matrix ODE `Y' = A(t) Y`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::system::CoefficientField;

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0];
const B5: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Outcome of one integration over an interval.
#[derive(Clone, Debug)]
pub struct Integrated {
    pub y: DMatrix<f64>,
    /// Sum of accepted local error estimates (absolute, max-entry).
    pub err: f64,
    pub steps: usize,
}

/// Integrate `Y' = A(t) Y` from `t0` to `t1` (either direction) starting at `y0`.
///
/// Local error per entry is held below `tol * (1 + |y|)`.
pub fn integrate_matrix(
    field: &dyn CoefficientField,
    y0: DMatrix<f64>,
    t0: f64,
    t1: f64,
    tol: f64,
    h_init: Option<f64>,
) -> Result<Integrated> {
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(Integrated { y: y0, err: 0.0, steps: 0 });
    }
    let dir = span.signum();
    let len = span.abs();
    let h_min = 1e-12 * (1.0 + t0.abs().max(t1.abs()));
    let mut h = h_init.unwrap_or(len.min(0.05)).min(len);
    let mut t = t0;
    let mut y = y0;
    let mut total_err = 0.0;
    let mut steps = 0usize;
    let mut k = Vec::with_capacity(7);

    let eval = |tt: f64| -> Result<DMatrix<f64>> {
        let a = field.coefficient(tt)?;
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "coefficient matrix".into(), t: tt });
        }
        Ok(a)
    };

    let mut k1 = &eval(t)? * &y;
    loop {
        let remaining = (t1 - t) * dir;
        if remaining <= 1e-14 * len.max(1.0) {
            break;
        }
        let last = h >= remaining;
        let step = if last { remaining } else { h };
        let hs = step * dir;

        k.clear();
        k.push(k1.clone());
        let stage = |coef: &[f64], k: &Vec<DMatrix<f64>>| -> DMatrix<f64> {
            let mut acc = y.clone();
            for (c, ki) in coef.iter().zip(k.iter()) {
                if *c != 0.0 {
                    acc += ki * (hs * c);
                }
            }
            acc
        };
        for (ci, coef) in [&A2[..], &A3[..], &A4[..], &A5[..], &A6[..]].iter().enumerate() {
            let yi = stage(coef, &k);
            let ki = &eval(t + C[ci + 1] * hs)? * &yi;
            k.push(ki);
        }
        let y5 = stage(&B5, &k);
        let k7 = &eval(t + hs)? * &y5;
        k.push(k7);

        let mut err = 0.0f64;
        let mut err_abs = 0.0f64;
        for idx in 0..y.len() {
            let mut e = 0.0;
            for s in 0..7 {
                let w = B5.get(s).copied().unwrap_or(0.0) - B4[s];
                if w != 0.0 {
                    e += w * k[s][idx];
                }
            }
            e *= hs;
            let scale = tol * (1.0 + y[idx].abs().max(y5[idx].abs()));
            err = err.max(e.abs() / scale);
            err_abs = err_abs.max(e.abs());
        }
        if !err.is_finite() {
            return Err(Error::NonFinite { what: "integrator state".into(), t });
        }
        if err <= 1.0 {
            t = if last { t1 } else { t + hs };
            y = y5;
            k1 = k.pop().unwrap();
            total_err += err_abs;
            steps += 1;
            let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            if !last {
                h = step * grow;
            }
        } else {
            h = step * (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            if h < h_min {
                return Err(Error::StepUnderflow { t });
            }
        }
    }
    Ok(Integrated { y, err: total_err, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::SystemSpec;

    #[test]
    fn constant_diagonal_exponential() {
        let spec = SystemSpec::diagonal("d", &[-1.0, 2.0]);
        let out = integrate_matrix(&spec, DMatrix::identity(2, 2), 0.0, 1.0, 1e-12, None).unwrap();
        assert!((out.y[(0, 0)] - (-1.0f64).exp()).abs() < 1e-10);
        assert!((out.y[(1, 1)] - 2.0f64.exp()).abs() < 1e-9);
        let back = integrate_matrix(&spec, DMatrix::identity(2, 2), 1.0, 0.0, 1e-12, None).unwrap();
        assert!((back.y[(0, 0)] - 1.0f64.exp()).abs() < 1e-10);
    }
}
