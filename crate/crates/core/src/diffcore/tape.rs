//! Reverse-mode tape.
//!
//! Each recorded node owns one [`Op`] instance together with the handles of
//! its inputs and outputs. `backward` walks the nodes in reverse order and
//! hands every op exactly the gradients of its outputs.

use std::collections::HashMap;

use crate::diffcore::{ParamStore, Real, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything an op sees during its backward pass.
pub struct BackwardCtx<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub outputs: &'a [&'a Tensor<T>],
    /// Upstream gradient per output; `None` when nothing downstream used it.
    pub grads: &'a [Option<&'a Tensor<T>>],
    /// Which inputs need a gradient.
    pub needs: &'a [bool],
}

impl<'a, T: Real> BackwardCtx<'a, T> {
    /// Upstream gradient of output `i`, materialising zeros when absent.
    pub fn grad_or_zeros(&self, i: usize) -> std::borrow::Cow<'a, Tensor<T>> {
        match self.grads[i] {
            Some(g) => std::borrow::Cow::Borrowed(g),
            None => std::borrow::Cow::Owned(Tensor::zeros(self.outputs[i].shape())),
        }
    }
}

/// A differentiable operation with paired forward and analytic backward.
pub trait Op<T: Real> {
    fn name(&self) -> &'static str;

    /// Computes the outputs; may save whatever context backward needs.
    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>>;

    /// Returns one gradient slot per input (`None` for inputs not in `needs`).
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T> {
    op: Box<dyn Op<T>>,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
}

pub struct Tape<T: Real> {
    values: Vec<Tensor<T>>,
    requires: Vec<bool>,
    nodes: Vec<Node<T>>,
    params: Vec<(usize, String)>,
    bound: HashMap<String, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            requires: Vec::new(),
            nodes: Vec::new(),
            params: Vec::new(),
            bound: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, requires: bool) -> Var {
        self.values.push(value);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true)
    }

    /// Leaf bound to a named parameter. Repeated requests return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| contract(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push(value, true);
        self.params.push((v.0, name.to_string()));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Makes later `param(.., name)` calls resolve to an existing var.
    pub fn bind_param(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Runs `op` forward and records it.
    pub fn apply(&mut self, mut op: impl Op<T> + 'static, inputs: &[Var]) -> Result<Vec<Var>> {
        let outs = {
            let refs: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.values[v.0]).collect();
            op.forward(&refs)?
        };
        for (k, t) in outs.iter().enumerate() {
            if !t.is_finite() {
                return Err(Error::Numerical {
                    op: op.name().to_string(),
                    detail: format!("non-finite value in output {k}"),
                });
            }
        }
        let requires = inputs.iter().any(|v| self.requires[v.0]);
        let outputs: Vec<usize> = outs.into_iter().map(|t| self.push(t, requires).0).collect();
        let vars = outputs.iter().map(|&i| Var(i)).collect();
        if requires {
            self.nodes.push(Node {
                op: Box::new(op),
                inputs: inputs.iter().map(|v| v.0).collect(),
                outputs,
            });
        }
        Ok(vars)
    }

    /// Single-output convenience over [`Tape::apply`].
    pub fn apply1(&mut self, op: impl Op<T> + 'static, inputs: &[Var]) -> Result<Var> {
        let outs = self.apply(op, inputs)?;
        debug_assert_eq!(outs.len(), 1);
        Ok(outs[0])
    }

    /// Back-propagates from a scalar `loss`, summing gradients over every
    /// path, then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.values[loss.0].numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::full(self.values[loss.0].shape(), T::one()));

        let nodes = std::mem::take(&mut self.nodes);
        for node in nodes.iter().rev() {
            if node.outputs.iter().all(|&o| grads[o].is_none()) {
                continue;
            }
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.requires[i]).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let input_grads = {
                let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &self.values[i]).collect();
                let outputs: Vec<&Tensor<T>> =
                    node.outputs.iter().map(|&o| &self.values[o]).collect();
                let out_grads: Vec<Option<&Tensor<T>>> =
                    node.outputs.iter().map(|&o| grads[o].as_ref()).collect();
                node.op.backward(&BackwardCtx {
                    inputs: &inputs,
                    outputs: &outputs,
                    grads: &out_grads,
                    needs: &needs,
                })?
            };
            if input_grads.len() != node.inputs.len() {
                return Err(contract(format!(
                    "`{}` backward returned {} gradients for {} inputs",
                    node.op.name(),
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for ((&idx, g), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                if g.shape() != self.values[idx].shape() {
                    return Err(contract(format!(
                        "`{}` backward produced gradient of shape {:?} for input of shape {:?}",
                        node.op.name(),
                        g.shape(),
                        self.values[idx].shape()
                    )));
                }
                if !g.is_finite() {
                    return Err(Error::Numerical {
                        op: node.op.name().to_string(),
                        detail: "non-finite gradient".into(),
                    });
                }
                match &mut grads[idx] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }

        let params = std::mem::take(&mut self.params);
        self.values.clear();
        self.requires.clear();
        self.bound.clear();
        Ok(Gradients { grads, params })
    }

    /// [`Tape::backward`] followed by accumulation into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store)?;
        Ok(grads)
    }
}

/// Gradients of every leaf reached by a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, String)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(_, n)| n == name)
            .and_then(|&(i, _)| self.grads[i].as_ref())
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (idx, name) in &self.params {
            if let Some(g) = &self.grads[*idx] {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}
