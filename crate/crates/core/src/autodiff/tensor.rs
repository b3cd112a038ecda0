use crate::error::{CdError, CdResult};
use crate::raster::Raster;
use crate::scalar::Scalar;

/// Dense n-dimensional value buffer, row-major.
///
/// The `grad` buffer is populated only on parameter tensors inside a
/// `ParamSet`; activations on the tape keep their gradients in the
/// `Gradients` map returned by `Tape::backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, checking length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> CdResult<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(CdError::ShapeMismatch(format!(
                "shape {shape:?} does not describe a buffer of {} entries",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CdError::ShapeMismatch(format!(
                "non-finite entry in tensor of shape {shape:?}"
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    /// Internal constructor for op outputs; skips the finiteness scan.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::raw(shape, vec![S::zero(); numel])
    }

    pub fn scalar(v: S) -> Self {
        Self::raw(vec![1], vec![v])
    }

    /// CHW layout copy of a raster, with a leading batch axis of 1.
    pub fn from_raster(r: &Raster<S>) -> Self {
        let (h, w, c) = (r.height(), r.width(), r.channels());
        let mut data = Vec::with_capacity(h * w * c);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(r.get(x, y, ch));
                }
            }
        }
        Self::raw(vec![1, c, h, w], data)
    }

    /// Stacks same-shaped rasters into an `[N, C, H, W]` batch.
    pub fn from_rasters(rasters: &[Raster<S>]) -> CdResult<Self> {
        let first = rasters.first().ok_or_else(|| {
            CdError::ShapeMismatch("cannot stack an empty raster list".into())
        })?;
        let (h, w, c) = (first.height(), first.width(), first.channels());
        let mut data = Vec::with_capacity(rasters.len() * c * h * w);
        for r in rasters {
            if (r.height(), r.width(), r.channels()) != (h, w, c) {
                return Err(CdError::ShapeMismatch(format!(
                    "raster {}x{}x{} does not match batch shape {}x{}x{}",
                    r.height(),
                    r.width(),
                    r.channels(),
                    h,
                    w,
                    c
                )));
            }
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(r.get(x, y, ch));
                    }
                }
            }
        }
        Ok(Self::raw(vec![rasters.len(), c, h, w], data))
    }

    /// Stacks single-item tensors (leading axis 1) into one batch tensor.
    pub fn stack(items: &[&Tensor<S>]) -> CdResult<Self> {
        let first = items.first().ok_or_else(|| {
            CdError::ShapeMismatch("cannot stack an empty tensor list".into())
        })?;
        if first.shape[0] != 1 {
            return Err(CdError::ShapeMismatch(format!(
                "stack expects leading axis 1, got shape {:?}",
                first.shape
            )));
        }
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            if t.shape != first.shape {
                return Err(CdError::ShapeMismatch(format!(
                    "cannot stack shape {:?} with shape {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = items.len();
        Ok(Self::raw(shape, data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// The single entry of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Vec<S>) -> CdResult<()> {
        if g.len() != self.data.len() {
            return Err(CdError::ShapeMismatch(format!(
                "gradient length {} for tensor of {} entries",
                g.len(),
                self.data.len()
            )));
        }
        self.grad = Some(g);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Mutable value buffer together with the (read-only) gradient,
    /// for optimizer update loops.
    pub(crate) fn split_mut(&mut self) -> (&mut [S], Option<&[S]>) {
        (&mut self.data, self.grad.as_deref())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Self::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_shape_and_finiteness() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2], vec![1.0, f32::INFINITY]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn from_raster_is_chw() {
        // 1x2 raster, 3 channels: pixel0 = (.1,.2,.3), pixel1 = (.4,.5,.6)
        let r = Raster::<f32>::new(1, 2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let t = Tensor::from_raster(&r);
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
    }

    #[test]
    fn grad_length_checked() {
        let mut t = Tensor::<f32>::zeros(vec![4]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        assert!(t.set_grad(vec![1.0; 4]).is_ok());
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
    }
}
