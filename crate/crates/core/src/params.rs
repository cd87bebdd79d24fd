//! Named parameter tensors.
//!
//! Every parameter bundle exposes its matrices in a fixed order under stable
//! names. Gradients use the same types as the parameters they belong to, so
//! flattening, optimizer updates, finite-difference probes and serialization
//! all go through this one visitor.

use crate::Matrix;

pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>);

    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for (_, m) in self.named_tensors() {
            flat.extend_from_slice(m.data());
        }
        flat
    }

    /// Overwrites every entry from `flat`, in visiting order.
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (_, m) in self.named_tensors_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn zero(&mut self) {
        for (_, m) in self.named_tensors_mut() {
            m.fill(0.0);
        }
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.zero();
        z
    }

    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let theirs = other.named_tensors();
        for ((_, mine), (_, t)) in self.named_tensors_mut().into_iter().zip(theirs) {
            mine.add_assign(t);
        }
    }

    fn scale(&mut self, s: f64) {
        for (_, m) in self.named_tensors_mut() {
            m.scale(s);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Declares the tensor fields of a bundle, in order.
macro_rules! impl_parameters {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::params::Parameters for $ty {
            fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a $crate::Matrix)>) {
                $( out.push(($crate::params::join(prefix, stringify!($field)), &self.$field)); )*
            }
            fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut $crate::Matrix)>) {
                $( out.push(($crate::params::join(prefix, stringify!($field)), &mut self.$field)); )*
            }
        }
    };
}
pub(crate) use impl_parameters;
