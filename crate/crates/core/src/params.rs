//! Named-tensor walks over model parameters.

use crate::{Real, Tensor};

/// A structure holding named trainable tensors (and, optionally, non-trainable
/// buffers such as batch-norm running statistics).
///
/// Gradients are stored in a second instance of the same type, so walking a
/// model and its gradient in lockstep pairs every parameter with its
/// gradient.
pub trait ParamSet<T: Real> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn visit_buffers<'a>(&'a self, _prefix: &str, _f: &mut dyn FnMut(String, &'a Tensor<T>)) {}

    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Tensor<T>)) {}

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.len());
        n
    }

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, t| out.push((name, t)));
        out
    }

    /// All trainable values concatenated in visit order.
    fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params("", &mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    fn set_flat_params(&mut self, flat: &[T]) {
        let mut pos = 0;
        self.visit_params_mut("", &mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        });
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
