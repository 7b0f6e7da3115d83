//! Network skeleton: shallow encoder, expert module, deep encoder, head.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Bound, Graph, Layer, ParamStore, Stack, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::sgem::{self, Branch, ConfounderSet, Routing, SgemConfig};

/// Shape of each expert network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExpertForm {
    /// `ReLU(conv(f))`.
    Plain,
    /// `f + ReLU(conv(f))`.
    #[default]
    Residual,
}

/// Plain CNN description. Block `i` is a 3×3 convolution to `channels[i]`
/// followed by ReLU and, while the map is at least 4×4 and more blocks
/// follow, a 2×2 average pool. The expert module sits after block
/// `expert_point` (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_shape: [usize; 3],
    pub stem_blocks: usize,
    pub expert_point: usize,
    pub deep_blocks: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub expert_form: ExpertForm,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_shape: [3, 16, 16],
            stem_blocks: 2,
            expert_point: 1,
            deep_blocks: 2,
            channels: vec![16, 32, 32, 64],
            num_classes: 4,
            expert_form: ExpertForm::default(),
        }
    }
}

impl ModelSpec {
    pub fn num_blocks(&self) -> usize {
        self.stem_blocks + self.deep_blocks
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.num_blocks();
        if blocks == 0 {
            return Err(Error::config(
                "model.stem_blocks",
                "the network needs at least one block",
            ));
        }
        if self.expert_point == 0 || self.expert_point > blocks {
            return Err(Error::config(
                "model.expert_point",
                format!("{} is outside [1, {blocks}]", self.expert_point),
            ));
        }
        if self.channels.len() != blocks || self.channels.contains(&0) {
            return Err(Error::config(
                "model.channels",
                format!("need {blocks} positive widths, got {:?}", self.channels),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config(
                "model.num_classes",
                "need at least 2 classes",
            ));
        }
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config("model.input_shape", "axes must be positive"));
        }
        Ok(())
    }

    /// Whether block `i` (0-based) ends with a pool, given its input size.
    fn pools_after(&self, i: usize, h: usize, w: usize) -> bool {
        i + 1 < self.num_blocks() && h >= 4 && w >= 4 && h.is_multiple_of(2) && w.is_multiple_of(2)
    }

    /// `(C, H, W)` of the map entering the expert module.
    pub fn expert_shape(&self) -> (usize, usize, usize) {
        let [_, mut h, mut w] = self.input_shape;
        for i in 0..self.expert_point {
            if self.pools_after(i, h, w) {
                h /= 2;
                w /= 2;
            }
        }
        (self.channels[self.expert_point - 1], h, w)
    }
}

#[derive(Debug, Clone)]
pub struct ExpertModule {
    pub experts: Vec<Stack>,
    pub router: Stack,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub sgem: SgemConfig,
    pub params: ParamStore,
    pub shallow: Stack,
    pub expert_module: ExpertModule,
    pub deep: Stack,
    pub head: Stack,
    pub confounders: ConfounderSet,
}

/// Builds the network with He-initialized weights drawn from the `params`
/// stream of `seed`. Parameter creation order is fixed: blocks, experts,
/// router, head.
pub fn build_model(spec: &ModelSpec, sgem_cfg: &SgemConfig, seed: u64) -> Result<Model> {
    spec.validate()?;
    sgem_cfg.validate()?;
    let mut rng = stream(seed, Stream::Params);
    let mut params = ParamStore::new();
    let [mut cin, mut h, mut w] = spec.input_shape;
    let mut shallow = Vec::new();
    let mut deep = Vec::new();
    for (i, &cout) in spec.channels.iter().enumerate() {
        let target = if i < spec.expert_point {
            &mut shallow
        } else {
            &mut deep
        };
        target.push(Layer::conv3x3(
            &mut params,
            &format!("block{}.conv", i + 1),
            cin,
            cout,
            &mut rng,
        ));
        target.push(Layer::Relu);
        if spec.pools_after(i, h, w) {
            target.push(Layer::AvgPool2);
            h /= 2;
            w /= 2;
        }
        cin = cout;
    }
    let (ce, _, _) = spec.expert_shape();
    let experts = (0..sgem_cfg.n)
        .map(|i| {
            let body = vec![
                Layer::conv3x3(
                    &mut params,
                    &format!("expert{}.conv", i + 1),
                    ce,
                    ce,
                    &mut rng,
                ),
                Layer::Relu,
            ];
            match spec.expert_form {
                ExpertForm::Plain => Stack(body),
                ExpertForm::Residual => Stack(vec![Layer::Residual(body)]),
            }
        })
        .collect();
    let hidden = 4 * sgem_cfg.n;
    let router = Stack(vec![
        Layer::dense(&mut params, "router.fc1", 2 * ce, hidden, &mut rng),
        Layer::Relu,
        Layer::dense(&mut params, "router.fc2", hidden, sgem_cfg.n, &mut rng),
    ]);
    let head = Stack(vec![
        Layer::GlobalAvgPool,
        Layer::dense(&mut params, "head.fc", cin, spec.num_classes, &mut rng),
    ]);
    Ok(Model {
        spec: spec.clone(),
        sgem: sgem_cfg.clone(),
        params,
        shallow: Stack(shallow),
        expert_module: ExpertModule { experts, router },
        deep: Stack(deep),
        head,
        confounders: ConfounderSet::new(sgem_cfg.n, ce, sgem_cfg.tau),
    })
}

impl Model {
    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// SHA-256 over every parameter value, in creation order.
    pub fn param_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn check_input(&self, batch: &Tensor) -> Result<()> {
        let (_, c, h, w) = batch.dims4()?;
        if [c, h, w] != self.spec.input_shape {
            return Err(Error::shape(format!(
                "batch {:?} does not match model input {:?}",
                batch.shape(),
                self.spec.input_shape
            )));
        }
        Ok(())
    }

    pub fn encode_shallow(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.shallow.forward(g, p, x)
    }

    /// Style routing of shallow features.
    pub fn route(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Routing> {
        let z = sgem::style_embedding(g, features)?;
        sgem::route(
            g,
            &self.expert_module.router,
            p,
            z,
            self.sgem.n,
            self.sgem.k,
            self.sgem.routing,
        )
    }

    pub fn experts(
        &self,
        g: &mut Graph,
        p: &Bound,
        features: Var,
        routing: Option<&Routing>,
        branch: Branch,
    ) -> Result<Var> {
        sgem::moe_forward(g, &self.expert_module.experts, p, features, routing, branch)
    }

    /// Deep encoder followed by the head.
    pub fn classify(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Var> {
        let deep = self.deep.forward(g, p, features)?;
        self.head.forward(g, p, deep)
    }

    /// Inference graph: shallow encoder, routed expert mixture (or the
    /// first expert when the module is disabled), deep encoder, head. No
    /// confounder update and no fusion.
    pub fn inference_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let f = self.encode_shallow(g, p, x)?;
        let fe = if self.sgem.enabled {
            let r = self.route(g, p, f)?;
            self.experts(g, p, f, Some(&r), Branch::Augmented)?
        } else {
            self.experts(g, p, f, None, Branch::Original)?
        };
        self.classify(g, p, fe)
    }
}

/// Logits `[B, K]` for a batch, through the inference path.
pub fn forward_inference(model: &Model, batch: &Tensor) -> Result<Tensor> {
    model.check_input(batch)?;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(batch.clone());
    let y = model.inference_graph(&mut g, &p, x)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bdcl;

    fn default_model(seed: u64) -> Model {
        build_model(&ModelSpec::default(), &SgemConfig::default(), seed).unwrap()
    }

    #[test]
    fn default_forward_shape() {
        let m = default_model(1);
        let x = Tensor::zeros(vec![8, 3, 16, 16]);
        let y = forward_inference(&m, &x).unwrap();
        assert_eq!(y.shape(), &[8, 4]);
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // conv blocks: 3->16, 16->32, 32->32, 32->64 (weights + biases)
        let blocks =
            (16 * 3 * 9 + 16) + (32 * 16 * 9 + 32) + (32 * 32 * 9 + 32) + (64 * 32 * 9 + 64);
        // six 16->16 expert convs
        let experts = 6 * (16 * 16 * 9 + 16);
        // router 32 -> 24 -> 6, head 64 -> 4
        let router = (32 * 24 + 24) + (24 * 6 + 6);
        let head = 64 * 4 + 4;
        assert_eq!(blocks + experts + router + head, 47_954);
        assert_eq!(default_model(0).num_params(), 47_954);
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(
            default_model(5).param_checksum(),
            default_model(5).param_checksum()
        );
        assert_ne!(
            default_model(5).param_checksum(),
            default_model(6).param_checksum()
        );
    }

    #[test]
    fn zero_batch_gives_identical_rows() {
        let m = default_model(2);
        let y = forward_inference(&m, &Tensor::zeros(vec![3, 3, 16, 16])).unwrap();
        let rows: Vec<&[f64]> = y.data().chunks(4).collect();
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[1], rows[2]);
    }

    #[test]
    fn inference_is_pure() {
        let m = default_model(3);
        let data: Vec<f64> = (0..2 * 3 * 256)
            .map(|v| ((v * 31) % 97) as f64 / 97.0)
            .collect();
        let x = Tensor::new(vec![2, 3, 16, 16], data).unwrap();
        let before = m.confounders.checksum();
        bdcl::reset_counters();
        let a = forward_inference(&m, &x).unwrap();
        let b = forward_inference(&m, &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(bdcl::fusion_count(), 0);
        assert_eq!(m.confounders.checksum(), before);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = default_model(1);
        let r = forward_inference(&m, &Tensor::zeros(vec![1, 3, 8, 8]));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let mut s = ModelSpec::default();
        s.expert_point = 5;
        assert!(matches!(s.validate(), Err(Error::Config { .. })));
        let mut s = ModelSpec::default();
        s.num_classes = 1;
        assert!(matches!(s.validate(), Err(Error::Config { .. })));
        let mut s = ModelSpec::default();
        s.channels = vec![];
        assert!(matches!(s.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn every_expert_point_builds_and_runs() {
        for p in 1..=4 {
            let spec = ModelSpec {
                expert_point: p,
                ..ModelSpec::default()
            };
            let m = build_model(&spec, &SgemConfig::default(), 1).unwrap();
            let y = forward_inference(&m, &Tensor::zeros(vec![2, 3, 16, 16])).unwrap();
            assert_eq!(y.shape(), &[2, 4]);
        }
    }
}
