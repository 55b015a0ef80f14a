//! Parameter containers and initialisers shared by every block.

use crate::tensor::{Element, SeedStream, Tensor};

/// A value holding learnable tensors, visited in a fixed declaration order.
pub trait Module<T: Element> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    /// `(name, tensor)` pairs in visiting order.
    fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |n, t| out.push((n, t.clone())));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }

    fn zero_grad(&self) {
        self.visit_params("", &mut |_, t| t.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A field of a [`Module`]: a tensor, a sub-module, or an optional / repeated one.
pub trait ParamField<T: Element> {
    fn visit_field(&self, name: &str, f: &mut dyn FnMut(String, &Tensor<T>));
    fn visit_field_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));
}

impl<T: Element> ParamField<T> for Tensor<T> {
    fn visit_field(&self, name: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(name.to_string(), self)
    }

    fn visit_field_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(name.to_string(), self)
    }
}

impl<T: Element, P: ParamField<T>> ParamField<T> for Option<P> {
    fn visit_field(&self, name: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        if let Some(p) = self {
            p.visit_field(name, f)
        }
    }

    fn visit_field_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        if let Some(p) = self {
            p.visit_field_mut(name, f)
        }
    }
}

impl<T: Element, P: ParamField<T>> ParamField<T> for Vec<P> {
    fn visit_field(&self, name: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit_field(&join(name, &i.to_string()), f)
        }
    }

    fn visit_field_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_field_mut(&join(name, &i.to_string()), f)
        }
    }
}

/// Implements [`Module`] and [`ParamField`] for a struct generic over `T`
/// by visiting the listed fields in order.
macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Element> $crate::module::Module<T> for $ty<T> {
            fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &$crate::tensor::Tensor<T>)) {
                $( $crate::module::ParamField::visit_field(&self.$field, &$crate::module::join(prefix, stringify!($field)), f); )*
            }

            fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut $crate::tensor::Tensor<T>)) {
                $( $crate::module::ParamField::visit_field_mut(&mut self.$field, &$crate::module::join(prefix, stringify!($field)), f); )*
            }
        }

        impl<T: $crate::tensor::Element> $crate::module::ParamField<T> for $ty<T> {
            fn visit_field(&self, name: &str, f: &mut dyn FnMut(String, &$crate::tensor::Tensor<T>)) {
                $crate::module::Module::visit_params(self, name, f)
            }

            fn visit_field_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut $crate::tensor::Tensor<T>)) {
                $crate::module::Module::visit_params_mut(self, name, f)
            }
        }
    };
}
pub(crate) use impl_module;

/// Learnable leaf filled with `value`.
pub fn constant<T: Element>(shape: &[usize], value: f64) -> Tensor<T> {
    Tensor::full(shape, T::of(value)).requires_grad()
}

/// Learnable leaf of normal samples with standard deviation `std`.
pub fn normal<T: Element>(shape: &[usize], std: f64, rng: &mut SeedStream) -> Tensor<T> {
    Tensor::randn(shape, std, rng).requires_grad()
}

/// Kaiming-normal (fan-in, gain sqrt 2) weights.
pub fn kaiming<T: Element>(shape: &[usize], fan_in: usize, rng: &mut SeedStream) -> Tensor<T> {
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Parameters in visiting order.
pub fn params_of<T: Element, M: Module<T> + ?Sized>(m: &M) -> Vec<Tensor<T>> {
    let mut out = Vec::new();
    m.visit_params("", &mut |_, t| out.push(t.clone()));
    out
}

/// A copy of `m` whose parameters, in visiting order, are replaced by `params`.
///
/// # Panics
/// If `params` holds fewer tensors than `m` has parameters.
pub fn with_params<T: Element, M: Module<T> + Clone>(m: &M, params: &[Tensor<T>]) -> M {
    let mut out = m.clone();
    let mut it = params.iter();
    out.visit_params_mut("", &mut |n, t| *t = it.next().unwrap_or_else(|| panic!("no tensor for {n}")).clone());
    out
}

pub fn zero_all<T: Element, M: Module<T> + ?Sized>(m: &mut M) {
    m.visit_params_mut("", &mut |_, t| *t = constant(t.shape(), 0.0));
}
