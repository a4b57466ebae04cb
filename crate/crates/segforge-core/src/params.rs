//! Parameter registry: named learnable tensors plus batchnorm running state.
//!
//! Registration order is the canonical order everywhere (checkpoint records,
//! optimizer sweeps, gradient checks), so a config maps to one fixed layout.
//! Names form one flat namespace; batchnorm entries also reserve their three
//! derived checkpoint record names up front so collisions surface at build
//! time, not at save time.

use std::collections::HashSet;

use crate::element::Element;
use crate::tape::{BnState, Gradients, Mode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnId(pub(crate) usize);

/// Learnable tensor with its gradient slot and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Parameter<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct BnEntry<T: Element> {
    pub name: String,
    pub state: BnState<T>,
}

pub const BN_SUFFIXES: [&str; 3] = ["running_mean", "running_var", "initialized"];

#[derive(Debug, Clone)]
pub struct Registry<T: Element> {
    params: Vec<Parameter<T>>,
    bns: Vec<BnEntry<T>>,
    names: HashSet<String>,
}

impl<T: Element> Default for Registry<T> {
    fn default() -> Self {
        Registry::new()
    }
}

impl<T: Element> Registry<T> {
    pub fn new() -> Registry<T> {
        Registry {
            params: Vec::new(),
            bns: Vec::new(),
            names: HashSet::new(),
        }
    }

    fn claim(&mut self, name: &str) {
        assert!(
            self.names.insert(name.to_string()),
            "duplicate registry name '{name}'"
        );
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        self.claim(&name);
        let m = Tensor::zeros(value.shape().clone());
        let v = Tensor::zeros(value.shape().clone());
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            m,
            v,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_bn(&mut self, name: impl Into<String>, channels: usize) -> BnId {
        let name = name.into();
        self.claim(&name);
        for suffix in BN_SUFFIXES {
            self.claim(&format!("{name}.{suffix}"));
        }
        self.bns.push(BnEntry {
            name,
            state: BnState::new(channels),
        });
        BnId(self.bns.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn bn(&self, id: BnId) -> &BnEntry<T> {
        &self.bns[id.0]
    }

    pub fn bn_mut(&mut self, id: BnId) -> &mut BnEntry<T> {
        &mut self.bns[id.0]
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_bns(&self) -> usize {
        self.bns.len()
    }

    pub fn iter_params(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_bns(&self) -> impl Iterator<Item = (BnId, &BnEntry<T>)> {
        self.bns.iter().enumerate().map(|(i, b)| (BnId(i), b))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn find_bn(&self, name: &str) -> Option<BnId> {
        self.bns.iter().position(|b| b.name == name).map(BnId)
    }

    /// Total learnable scalar count (the "parameter count" of model docs).
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Move gradients harvested from a backward pass into the parameters'
    /// grad slots. Unbound or unreached parameters get None (gradient zero).
    pub fn store_grads(&mut self, bound: &[Option<Var>], grads: &mut Gradients<T>) {
        for (param, slot) in self.params.iter_mut().zip(bound) {
            param.grad = slot.and_then(|v| grads.take(v));
        }
    }
}

/// One forward pass in the making: a tape, the mode, and the leaf bindings of
/// every parameter touched so far. Binding is memoized so a parameter used
/// twice shares one leaf and its gradients accumulate.
pub struct ForwardCx<'r, T: Element> {
    pub tape: Tape<T>,
    pub mode: Mode,
    reg: &'r mut Registry<T>,
    bound: Vec<Option<Var>>,
}

impl<'r, T: Element> ForwardCx<'r, T> {
    pub fn new(reg: &'r mut Registry<T>, mode: Mode) -> ForwardCx<'r, T> {
        let bound = vec![None; reg.params.len()];
        ForwardCx {
            tape: Tape::new(),
            mode,
            reg,
            bound,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = match self.mode {
            // Inference needs no parameter gradients; constants keep the
            // backward machinery out of eval paths entirely.
            Mode::Train => self.tape.leaf(self.reg.params[id.0].value.clone()),
            Mode::Infer => self.tape.constant(self.reg.params[id.0].value.clone()),
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Batchnorm wired through the registry's running state for `bn`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        bn: BnId,
        momentum: f64,
        eps: f64,
    ) -> Result<Var, crate::error::TensorError> {
        let g = self.param(gamma);
        let b = self.param(beta);
        let mode = self.mode;
        let state = &mut self.reg.bns[bn.0].state;
        self.tape.batchnorm2d(x, g, b, state, mode, momentum, eps)
    }

    /// Hand back the tape and bindings for backward + gradient harvest.
    pub fn into_parts(self) -> (Tape<T>, Vec<Option<Var>>) {
        (self.tape, self.bound)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    #[should_panic(expected = "duplicate registry name")]
    fn duplicate_names_are_rejected() {
        let mut reg = Registry::<f64>::new();
        reg.add_param("w", Tensor::zeros(Shape::new(vec![2]).unwrap()));
        reg.add_param("w", Tensor::zeros(Shape::new(vec![2]).unwrap()));
    }

    #[test]
    #[should_panic(expected = "duplicate registry name")]
    fn bn_derived_names_share_the_namespace() {
        let mut reg = Registry::<f64>::new();
        reg.add_bn("stem.bn1", 4);
        reg.add_param("stem.bn1.running_mean", Tensor::zeros(Shape::new(vec![4]).unwrap()));
    }

    #[test]
    fn binding_is_memoized_per_pass() {
        let mut reg = Registry::<f64>::new();
        let w = reg.add_param("w", Tensor::full(Shape::new(vec![3]).unwrap(), 2.0));
        let mut cx = ForwardCx::new(&mut reg, Mode::Train);
        let a = cx.param(w);
        let b = cx.param(w);
        assert_eq!(a, b);
        assert_eq!(cx.tape.len(), 1);
    }

    #[test]
    fn grads_land_in_the_parameter_slots() {
        let mut reg = Registry::<f64>::new();
        let w = reg.add_param(
            "w",
            Tensor::new(Shape::new(vec![3]).unwrap(), vec![1.0, -2.0, 3.0]).unwrap(),
        );
        let mut cx = ForwardCx::new(&mut reg, Mode::Train);
        let wv = cx.param(w);
        let sq = cx.tape.mul(wv, wv).unwrap();
        let loss = cx.tape.sum_all(sq);
        let (tape, bound) = cx.into_parts();
        let mut grads = tape.backward(loss).unwrap();
        reg.store_grads(&bound, &mut grads);
        assert_eq!(
            reg.param(w).grad.as_ref().unwrap().data(),
            &[2.0, -4.0, 6.0]
        );
    }

    #[test]
    fn infer_mode_binds_constants() {
        let mut reg = Registry::<f64>::new();
        let w = reg.add_param("w", Tensor::full(Shape::new(vec![2]).unwrap(), 1.5));
        let mut cx = ForwardCx::new(&mut reg, Mode::Infer);
        let wv = cx.param(w);
        assert!(!cx.tape.requires_grad(wv));
    }

    #[test]
    fn lookup_by_name_round_trips() {
        let mut reg = Registry::<f64>::new();
        let w = reg.add_param("enc1.conv1.w", Tensor::zeros(Shape::new(vec![2]).unwrap()));
        let bn = reg.add_bn("enc1.bn1", 8);
        assert_eq!(reg.find("enc1.conv1.w"), Some(w));
        assert_eq!(reg.find_bn("enc1.bn1"), Some(bn));
        assert_eq!(reg.find("enc1.conv9.w"), None);
        assert_eq!(reg.bn(bn).state.channels(), 8);
    }
}
