//! Parameterised layers shared by every part of the detector.

use crate::error::Result;
use crate::tensor::{Element, Graph, NodeId, ParamId, ParamStore, Tensor};

/// Registers parameters under a dotted path prefix and initialises them.
pub struct Builder<'s, T: Element> {
    pub store: &'s mut ParamStore<T>,
    pub seed: u64,
}

impl<'s, T: Element> Builder<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, seed: u64) -> Self {
        Self { store, seed }
    }

    fn weight(&mut self, path: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let id = self.store.add(path, Tensor::zeros(shape))?;
        self.store.xavier_init(id, fan_in, fan_out, self.seed)?;
        Ok(id)
    }

    fn bias(&mut self, path: &str, n: usize) -> Result<ParamId> {
        self.store.add(path, Tensor::zeros(&[n]))
    }

    pub fn conv(&mut self, path: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Conv> {
        let w = self.weight(&format!("{path}.weight"), &[cout, cin, k, k], cin * k * k, cout * k * k)?;
        let b = self.bias(&format!("{path}.bias"), cout)?;
        Ok(Conv {
            w,
            b,
            stride,
            pad: k / 2,
        })
    }

    pub fn fc(&mut self, path: &str, din: usize, dout: usize) -> Result<Fc> {
        let w = self.weight(&format!("{path}.weight"), &[dout, din], din, dout)?;
        let b = self.bias(&format!("{path}.bias"), dout)?;
        Ok(Fc { w, b })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn forward_relu<T: Element>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let y = self.forward(g, x)?;
        Ok(g.relu(y))
    }

    pub fn param_count(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k + cout
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Fc {
    pub w: ParamId,
    pub b: ParamId,
}

impl Fc {
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, Some(b))
    }

    pub fn forward_relu<T: Element>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let y = self.forward(g, x)?;
        Ok(g.relu(y))
    }

    pub fn param_count(din: usize, dout: usize) -> usize {
        dout * din + dout
    }
}
