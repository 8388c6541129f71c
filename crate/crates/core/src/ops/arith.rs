//! Elementwise arithmetic and full reductions.

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::tensor::{Graph, Tensor};

fn check_same_shape<E: Elem>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        for (axis, (x, y)) in a.shape().iter().zip(b.shape().iter()).enumerate() {
            if x != y {
                return Err(TensorError::ShapeMismatch {
                    op,
                    axis,
                    expected: *x,
                    got: *y,
                });
            }
        }
        return Err(TensorError::ShapeMismatch {
            op,
            axis: a.rank().min(b.rank()),
            expected: a.rank(),
            got: b.rank(),
        });
    }
    Ok(())
}

impl<E: Elem> Graph<E> {
    pub fn add(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("add", a, b)?;
        let (da, db) = (a.data_rc(), b.data_rc());
        let out: Vec<E> = da.iter().zip(db.iter()).map(|(&x, &y)| x + y).collect();
        let y = Tensor::result(a.shape().to_vec(), out, self.tracks(&[a, b]));
        if self.tracks(&[a, b]) {
            let (a, b, y2) = (a.clone(), b.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    a.accum_grad(|ga| ga.iter_mut().zip(dy).for_each(|(g, &d)| *g += d));
                    b.accum_grad(|gb| gb.iter_mut().zip(dy).for_each(|(g, &d)| *g += d));
                });
            });
        }
        Ok(y)
    }

    pub fn sub(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("sub", a, b)?;
        let (da, db) = (a.data_rc(), b.data_rc());
        let out: Vec<E> = da.iter().zip(db.iter()).map(|(&x, &y)| x - y).collect();
        let y = Tensor::result(a.shape().to_vec(), out, self.tracks(&[a, b]));
        if self.tracks(&[a, b]) {
            let (a, b, y2) = (a.clone(), b.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    a.accum_grad(|ga| ga.iter_mut().zip(dy).for_each(|(g, &d)| *g += d));
                    b.accum_grad(|gb| gb.iter_mut().zip(dy).for_each(|(g, &d)| *g -= d));
                });
            });
        }
        Ok(y)
    }

    pub fn mul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("mul", a, b)?;
        let (da, db) = (a.data_rc(), b.data_rc());
        let out: Vec<E> = da.iter().zip(db.iter()).map(|(&x, &y)| x * y).collect();
        let y = Tensor::result(a.shape().to_vec(), out, self.tracks(&[a, b]));
        if self.tracks(&[a, b]) {
            let (a, b, y2) = (a.clone(), b.clone(), y.clone());
            let (da, db) = (da.clone(), db.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    a.accum_grad(|ga| {
                        for i in 0..ga.len() {
                            ga[i] += dy[i] * db[i];
                        }
                    });
                    b.accum_grad(|gb| {
                        for i in 0..gb.len() {
                            gb[i] += dy[i] * da[i];
                        }
                    });
                });
            });
        }
        Ok(y)
    }

    pub fn scale(&self, a: &Tensor<E>, k: f64) -> Result<Tensor<E>> {
        let ke = E::from_f64(k);
        let da = a.data_rc();
        let out: Vec<E> = da.iter().map(|&x| x * ke).collect();
        let y = Tensor::result(a.shape().to_vec(), out, self.tracks(&[a]));
        if self.tracks(&[a]) {
            let (a, y2) = (a.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    a.accum_grad(|ga| {
                        for i in 0..ga.len() {
                            ga[i] += dy[i] * ke;
                        }
                    });
                });
            });
        }
        Ok(y)
    }

    pub fn add_scalar(&self, a: &Tensor<E>, k: f64) -> Result<Tensor<E>> {
        let ke = E::from_f64(k);
        let da = a.data_rc();
        let out: Vec<E> = da.iter().map(|&x| x + ke).collect();
        let y = Tensor::result(a.shape().to_vec(), out, self.tracks(&[a]));
        if self.tracks(&[a]) {
            let (a, y2) = (a.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    a.accum_grad(|ga| ga.iter_mut().zip(dy).for_each(|(g, &d)| *g += d));
                });
            });
        }
        Ok(y)
    }

    pub fn sum_all(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let da = a.data_rc();
        let mut s = E::ZERO;
        for &x in da.iter() {
            s += x;
        }
        let y = Tensor::result(vec![], vec![s], self.tracks(&[a]));
        if self.tracks(&[a]) {
            let (a, y2) = (a.clone(), y.clone());
            self.record(move || {
                y2.with_grad(|dy| {
                    let d = dy[0];
                    a.accum_grad(|ga| ga.iter_mut().for_each(|g| *g += d));
                });
            });
        }
        Ok(y)
    }

    pub fn mean_all(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let n = a.numel();
        if n == 0 {
            return Err(TensorError::param("mean_all", "empty tensor"));
        }
        let s = self.sum_all(a)?;
        self.scale(&s, 1.0 / n as f64)
    }
}
