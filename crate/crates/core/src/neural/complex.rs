//! Complex matrices on the tape as `(re, im)` pairs of real values.
//!
//! These mirror [`crate::linalg`] operation for operation, so a taped
//! computation produces the same numbers as the plain one.

use crate::error::{Error, Result};
use crate::linalg::{real_inverse_with_cond, ComplexMatrix, REAL_PART_COND};
use crate::neural::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

impl CVar {
    pub fn param(tape: &mut Tape, m: &ComplexMatrix) -> Self {
        Self {
            re: tape.param(m.re().clone()),
            im: tape.param(m.im().clone()),
        }
    }

    pub fn constant(tape: &mut Tape, m: &ComplexMatrix) -> Self {
        Self {
            re: tape.constant(m.re().clone()),
            im: tape.constant(m.im().clone()),
        }
    }

    pub fn value(&self, tape: &Tape) -> ComplexMatrix {
        ComplexMatrix::from_parts(tape.value(self.re).clone(), tape.value(self.im).clone())
            .expect("re and im recorded with equal shapes")
    }

    pub fn shape(&self, tape: &Tape) -> (usize, usize) {
        tape.shape(self.re)
    }

    /// Splits a real `[Re | Im]` row-stacked value into a complex pair.
    pub fn from_stacked_rows(tape: &mut Tape, stacked: Var) -> Result<Self> {
        let (rows, width) = tape.shape(stacked);
        if width % 2 != 0 {
            return Err(Error::Format(format!("stacked row width {width} is not even")));
        }
        let half = width / 2;
        Ok(Self {
            re: tape.slice(stacked, 0..rows, 0..half)?,
            im: tape.slice(stacked, 0..rows, half..width)?,
        })
    }

    pub fn to_stacked_rows(&self, tape: &mut Tape) -> Result<Var> {
        tape.concat_cols(&[self.re, self.im])
    }

    pub fn rows(&self, tape: &mut Tape, range: std::ops::Range<usize>) -> Result<Self> {
        let cols = tape.shape(self.re).1;
        Ok(Self {
            re: tape.slice(self.re, range.clone(), 0..cols)?,
            im: tape.slice(self.im, range, 0..cols)?,
        })
    }
}

/// Block product `[Re C; Im C] = [Re A, -Im A; Im A, Re A][Re B; Im B]`.
pub fn cmul(tape: &mut Tape, a: CVar, b: CVar) -> Result<CVar> {
    let rr = tape.matmul(a.re, b.re)?;
    let ii = tape.matmul(a.im, b.im)?;
    let ir = tape.matmul(a.im, b.re)?;
    let ri = tape.matmul(a.re, b.im)?;
    Ok(CVar {
        re: tape.sub(rr, ii)?,
        im: tape.add(ir, ri)?,
    })
}

pub fn hermitian(tape: &mut Tape, a: CVar) -> CVar {
    let re = tape.transpose(a.re);
    let im_t = tape.transpose(a.im);
    CVar { re, im: tape.neg(im_t) }
}

pub fn add(tape: &mut Tape, a: CVar, b: CVar) -> Result<CVar> {
    Ok(CVar {
        re: tape.add(a.re, b.re)?,
        im: tape.add(a.im, b.im)?,
    })
}

pub fn scale_by(tape: &mut Tape, a: CVar, s: Var) -> Result<CVar> {
    Ok(CVar {
        re: tape.scale_by(a.re, s)?,
        im: tape.scale_by(a.im, s)?,
    })
}

/// `‖A‖_F²` as a `1 x 1` value.
pub fn fro_norm_sq(tape: &mut Tape, a: CVar) -> Result<Var> {
    let r2 = tape.square(a.re);
    let i2 = tape.square(a.im);
    let rs = tape.sum(r2);
    let is = tape.sum(i2);
    tape.add(rs, is)
}

/// Elementwise `|a_ij|²`.
pub fn abs_sq(tape: &mut Tape, a: CVar) -> Result<Var> {
    let r2 = tape.square(a.re);
    let i2 = tape.square(a.im);
    tape.add(r2, i2)
}

/// Complex inverse from real inverses:
/// `Re E = (Dr + Di Dr^{-1} Di)^{-1}`, `Im E = -Dr^{-1} Di Re E`, with the
/// stacked `[Dr, -Di; Di, Dr]` inverse as the fallback for singular `Dr`.
pub fn cinv(tape: &mut Tape, d: CVar) -> Result<CVar> {
    let (n, m) = d.shape(tape);
    if n != m {
        return Err(Error::dims("cinv", (n, m), (n, m)));
    }
    let well_posed = matches!(
        real_inverse_with_cond(tape.value(d.re)),
        Ok((_, cond)) if cond <= REAL_PART_COND
    );
    if well_posed {
        let dr_inv = tape.inverse(d.re)?;
        let t = tape.matmul(dr_inv, d.im)?;
        let it = tape.matmul(d.im, t)?;
        let schur = tape.add(d.re, it)?;
        let e_re = tape.inverse(schur)?;
        let te = tape.matmul(t, e_re)?;
        let e_im = tape.neg(te);
        return Ok(CVar { re: e_re, im: e_im });
    }
    let neg_im = tape.neg(d.im);
    let top = tape.concat_cols(&[d.re, neg_im])?;
    let bottom = tape.concat_cols(&[d.im, d.re])?;
    let stacked = tape.concat_rows(&[top, bottom])?;
    let inv = tape.inverse(stacked)?;
    Ok(CVar {
        re: tape.slice(inv, 0..n, 0..n)?,
        im: tape.slice(inv, n..2 * n, 0..n)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use crate::rng::StreamRng;
    use ndarray::Array2;

    fn random(rng: &mut StreamRng, rows: usize, cols: usize) -> ComplexMatrix {
        ComplexMatrix::from_fn(rows, cols, |_, _| rng.complex_normal())
    }

    #[test]
    fn taped_ops_reproduce_plain_values() {
        let mut rng = StreamRng::new(1, 0);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 3);
        let mut tape = Tape::new();
        let av = CVar::constant(&mut tape, &a);
        let bv = CVar::constant(&mut tape, &b);
        let p = cmul(&mut tape, av, bv).unwrap();
        assert_eq!(p.value(&tape), linalg::cmul(&a, &b).unwrap());
        let h = hermitian(&mut tape, av);
        assert_eq!(h.value(&tape), linalg::hermitian(&a));
        let d = linalg::cmul(&a, &linalg::hermitian(&a)).unwrap();
        let dv = CVar::constant(&mut tape, &d);
        let e = cinv(&mut tape, dv).unwrap();
        assert!(e.value(&tape).max_abs_diff(&linalg::cinv(&d).unwrap()) < 1e-12);
    }

    #[test]
    fn cinv_gradient_matches_finite_differences() {
        let mut rng = StreamRng::new(2, 0);
        let d = random(&mut rng, 3, 3)
            .add(&ComplexMatrix::identity(3).scale(3.0))
            .unwrap();
        let w = random(&mut rng, 3, 3);
        let objective = |tape: &mut Tape, dv: CVar| {
            let wv = CVar::constant(tape, &w);
            let e = cinv(tape, dv).unwrap();
            let p = cmul(tape, e, wv).unwrap();
            let s = tape.square(p.re);
            let t = tape.sum(s);
            let u = tape.sum(p.im);
            tape.add(t, u).unwrap()
        };
        let mut tape = Tape::new();
        let dv = CVar::param(&mut tape, &d);
        let loss = objective(&mut tape, dv);
        let grads = tape.backward(loss).unwrap();
        let (g_re, g_im) = (grads.get(dv.re), grads.get(dv.im));
        let h = 1e-6;
        let eval = |m: &ComplexMatrix| {
            let mut t = Tape::new();
            let v = CVar::constant(&mut t, m);
            let l = objective(&mut t, v);
            t.scalar(l)
        };
        let mut fd_re = Array2::zeros((3, 3));
        let mut fd_im = Array2::zeros((3, 3));
        for i in 0..3 {
            for j in 0..3 {
                for (part, out) in [(0, &mut fd_re), (1, &mut fd_im)] {
                    let bump = if part == 0 {
                        num_complex::Complex64::new(h, 0.0)
                    } else {
                        num_complex::Complex64::new(0.0, h)
                    };
                    let mut p = d.clone();
                    p.set(i, j, d.get(i, j) + bump);
                    let mut m = d.clone();
                    m.set(i, j, d.get(i, j) - bump);
                    out[[i, j]] = (eval(&p) - eval(&m)) / (2.0 * h);
                }
            }
        }
        let err = ((&g_re - &fd_re).mapv(|x| x * x).sum() + (&g_im - &fd_im).mapv(|x| x * x).sum()).sqrt()
            / (fd_re.mapv(|x| x * x).sum() + fd_im.mapv(|x| x * x).sum()).sqrt();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn cinv_fallback_on_tape() {
        let d = ComplexMatrix::from_parts(Array2::zeros((2, 2)), Array2::eye(2)).unwrap();
        let mut tape = Tape::new();
        let dv = CVar::param(&mut tape, &d);
        let e = cinv(&mut tape, dv).unwrap();
        assert!(e.value(&tape).max_abs_diff(&linalg::cinv(&d).unwrap()) < 1e-15);
    }
}
