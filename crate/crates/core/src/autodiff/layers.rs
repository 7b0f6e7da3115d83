//! Parameter storage and the small layer vocabulary the networks are built
//! from.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Grads, Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a leaf; `trainable = false` binds them
    /// as constants (inference).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    let t = t.clone();
                    if trainable {
                        g.param(t)
                    } else {
                        g.constant(t)
                    }
                })
                .collect(),
        )
    }

    pub fn accumulate(&mut self, grads: &Grads, bound: &Bound) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            grads.accumulate_into(v, t)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Flat concatenation of every parameter value.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// `y = x · W + b`, `W: [in, out]`.
    Dense {
        weight: ParamId,
        bias: ParamId,
    },
    /// `W: [out, in, 3, 3]`.
    Conv3x3 {
        weight: ParamId,
        bias: ParamId,
    },
    Relu,
    AvgPool2,
    GlobalAvgPool,
    /// `y = x + inner(x)`; `inner` must preserve the shape.
    Residual(Vec<Layer>),
}

impl Layer {
    /// He-initialized dense layer with zero bias.
    pub fn dense(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = he_init(vec![inputs, outputs], inputs, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![outputs]));
        Layer::Dense { weight, bias }
    }

    /// He-initialized 3×3 convolution with zero bias.
    pub fn conv3x3(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = he_init(vec![outputs, inputs, 3, 3], inputs * 9, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![outputs]));
        Layer::Conv3x3 { weight, bias }
    }
}

fn he_init(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite positive std");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::from_parts(shape, data)
}

pub fn apply_layer(g: &mut Graph, layer: &Layer, params: &Bound, input: Var) -> Result<Var> {
    match layer {
        Layer::Dense { weight, bias } => g.dense(input, params.var(*weight), params.var(*bias)),
        Layer::Conv3x3 { weight, bias } => g.conv3x3(input, params.var(*weight), params.var(*bias)),
        Layer::Relu => g.relu(input),
        Layer::AvgPool2 => g.avg_pool2(input),
        Layer::GlobalAvgPool => g.global_avg_pool(input),
        Layer::Residual(inner) => {
            let y = inner
                .iter()
                .try_fold(input, |x, layer| apply_layer(g, layer, params, x))?;
            g.add(input, y)
        }
    }
}

/// Sequential composition of layers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stack(pub Vec<Layer>);

impl Stack {
    pub fn forward(&self, g: &mut Graph, params: &Bound, input: Var) -> Result<Var> {
        self.0
            .iter()
            .try_fold(input, |x, layer| apply_layer(g, layer, params, x))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        fn collect(layers: &[Layer], out: &mut Vec<ParamId>) {
            for l in layers {
                match l {
                    Layer::Dense { weight, bias } | Layer::Conv3x3 { weight, bias } => {
                        out.extend([*weight, *bias])
                    }
                    Layer::Residual(inner) => collect(inner, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        collect(&self.0, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng::{stream, Stream};

    #[test]
    fn identity_conv_layer_passes_input_through() {
        let mut store = ParamStore::new();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let weight = store.add("w", Tensor::new(vec![1, 1, 3, 3], k).unwrap());
        let bias = store.add("b", Tensor::zeros(vec![1]));
        let layer = Layer::Conv3x3 { weight, bias };
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = g.constant(Tensor::new(vec![1, 1, 4, 4], data.clone()).unwrap());
        let y = apply_layer(&mut g, &layer, &p, x).unwrap();
        assert_eq!(g.data(y), data.as_slice());
    }

    #[test]
    fn dense_layer_example() {
        let mut store = ParamStore::new();
        // [[1,2],[3,4]] as an out×in matrix, stored in×out.
        let weight = store.add(
            "w",
            Tensor::new(vec![2, 2], vec![1.0, 3.0, 2.0, 4.0]).unwrap(),
        );
        let bias = store.add("b", Tensor::zeros(vec![2]));
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let y = apply_layer(&mut g, &Layer::Dense { weight, bias }, &p, x).unwrap();
        assert_eq!(g.data(y), &[3.0, 7.0]);
    }

    #[test]
    fn dense_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let layer = Layer::dense(&mut store, "d", 3, 2, &mut stream(1, Stream::Params));
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(vec![1, 4]));
        assert!(matches!(
            apply_layer(&mut g, &layer, &p, x),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn he_init_is_deterministic() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        Layer::conv3x3(&mut a, "c", 3, 4, &mut stream(9, Stream::Params));
        Layer::conv3x3(&mut b, "c", 3, 4, &mut stream(9, Stream::Params));
        assert_eq!(a.flat(), b.flat());
        assert!(a.flat()[108..].iter().all(|&v| v == 0.0));
    }
}
