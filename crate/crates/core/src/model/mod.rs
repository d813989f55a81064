//! Encoder, classifier head and projection head over the [`tape`] engine.

pub mod checkpoint;
pub mod optim;
pub mod tape;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Matrix;

pub use optim::{cosine_lr, sgd_step, OptimConfig};
pub use tape::{Gradients, ImageGeom, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Shape of one input sample: `[D]` or `[C, H, W]`.
    pub input_shape: Vec<usize>,
    /// Output channels of the 3x3 convolution blocks (image inputs only).
    #[serde(default)]
    pub conv_channels: Vec<usize>,
    /// Widths of the affine + rectifier encoder layers.
    pub encoder_hidden: Vec<usize>,
    /// Widths of the projection hidden layers.
    pub projection_hidden: Vec<usize>,
    pub projection_dim: usize,
    /// Batch-statistics normalisation after each projection hidden layer.
    pub projection_norm: bool,
    pub n_classes: usize,
}

impl ArchConfig {
    /// Vector-input default: two 64-wide encoder layers, a two-layer 64-wide
    /// projection to 32 dimensions.
    pub fn vector(dim: usize, n_classes: usize) -> Self {
        Self {
            input_shape: vec![dim],
            conv_channels: Vec::new(),
            encoder_hidden: vec![64, 64],
            projection_hidden: vec![64, 64],
            projection_dim: 32,
            projection_norm: true,
            n_classes,
        }
    }

    /// Image-input default: three convolution blocks then one affine layer.
    pub fn image(channels: usize, height: usize, width: usize, n_classes: usize) -> Self {
        Self {
            input_shape: vec![channels, height, width],
            conv_channels: vec![8, 16, 32],
            encoder_hidden: vec![64],
            projection_hidden: vec![64, 64],
            projection_dim: 32,
            projection_norm: true,
            n_classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let dims_ok = !self.input_shape.is_empty()
            && self.input_shape.iter().all(|&d| d >= 1)
            && self.conv_channels.iter().all(|&d| d >= 1)
            && self.encoder_hidden.iter().all(|&d| d >= 1)
            && self.projection_hidden.iter().all(|&d| d >= 1)
            && self.projection_dim >= 1
            && self.n_classes >= 1;
        if !dims_ok {
            return Err(Error::InvalidConfig("all architecture dims must be >= 1".into()));
        }
        if !self.conv_channels.is_empty() && self.input_shape.len() != 3 {
            return Err(Error::InvalidConfig(
                "convolution blocks need [C, H, W] input".into(),
            ));
        }
        Ok(())
    }

    /// Geometry entering each conv block, in order.
    fn conv_geoms(&self) -> Vec<(ImageGeom, bool)> {
        let mut out = Vec::new();
        if self.conv_channels.is_empty() {
            return out;
        }
        let mut g = ImageGeom {
            channels: self.input_shape[0],
            height: self.input_shape[1],
            width: self.input_shape[2],
        };
        for &c in &self.conv_channels {
            let pool = g.height % 2 == 0 && g.width % 2 == 0 && g.height >= 2;
            out.push((g, pool));
            g = ImageGeom {
                channels: c,
                height: if pool { g.height / 2 } else { g.height },
                width: if pool { g.width / 2 } else { g.width },
            };
        }
        out
    }

    /// Width of the encoder output `h`.
    pub fn feature_dim(&self) -> usize {
        self.encoder_hidden
            .last()
            .or(self.conv_channels.last())
            .copied()
            .unwrap_or_else(|| self.input_dim())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Affine {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ProjectionLayer {
    affine: Affine,
    norm: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    conv: Vec<Affine>,
    encoder: Vec<Affine>,
    classifier: Affine,
    projection: Vec<ProjectionLayer>,
    projection_out: Affine,
}

/// Parameter name, shape and initial fan-in (0 for constant init).
type ParamSpec = (String, (usize, usize), usize, f64);

fn plan(arch: &ArchConfig) -> (Layout, Vec<ParamSpec>) {
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut add = |name: String, rows: usize, cols: usize, fan_in: usize, fill: f64| {
        specs.push((name, (rows, cols), fan_in, fill));
        specs.len() - 1
    };
    let mut conv = Vec::new();
    for (i, ((g, _), &c)) in arch.conv_geoms().iter().zip(&arch.conv_channels).enumerate() {
        let w = add(format!("conv{i}.w"), c, g.channels * 9, g.channels * 9, 0.0);
        let b = add(format!("conv{i}.b"), 1, c, 0, 0.0);
        conv.push(Affine { w, b });
    }
    let mut width = arch.conv_channels.last().copied().unwrap_or_else(|| arch.input_dim());
    let mut encoder = Vec::new();
    for (i, &d) in arch.encoder_hidden.iter().enumerate() {
        let w = add(format!("enc{i}.w"), width, d, width, 0.0);
        let b = add(format!("enc{i}.b"), 1, d, 0, 0.0);
        encoder.push(Affine { w, b });
        width = d;
    }
    let feat = width;
    let w = add("cls.w".into(), feat, arch.n_classes, feat, 0.0);
    let b = add("cls.b".into(), 1, arch.n_classes, 0, 0.0);
    let classifier = Affine { w, b };
    let mut projection = Vec::new();
    for (i, &d) in arch.projection_hidden.iter().enumerate() {
        let w = add(format!("proj{i}.w"), width, d, width, 0.0);
        let b = add(format!("proj{i}.b"), 1, d, 0, 0.0);
        let norm = arch.projection_norm.then(|| {
            (
                add(format!("proj{i}.gamma"), 1, d, 0, 1.0),
                add(format!("proj{i}.beta"), 1, d, 0, 0.0),
            )
        });
        projection.push(ProjectionLayer {
            affine: Affine { w, b },
            norm,
        });
        width = d;
    }
    let w = add("proj_out.w".into(), width, arch.projection_dim, width, 0.0);
    let b = add("proj_out.b".into(), 1, arch.projection_dim, 0, 0.0);
    let layout = Layout {
        conv,
        encoder,
        classifier,
        projection,
        projection_out: Affine { w, b },
    };
    (layout, specs)
}

/// All trainable parameters, their momentum buffers and the optimiser
/// counters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    arch: ArchConfig,
    names: Vec<String>,
    params: Vec<Matrix>,
    momentum: Vec<Matrix>,
    layout: Layout,
    pub step: u64,
    pub epoch: u64,
}

/// Parameter leaves of one model on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn var(&self, id: usize) -> Var {
        self.vars[id]
    }
}

impl ModelState {
    /// He-normal weights (variance `2 / fan_in`), zero biases, unit
    /// normalisation gains.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (layout, specs) = plan(arch);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (idx, (name, (rows, cols), fan_in, fill)) in specs.into_iter().enumerate() {
            let value = if fan_in > 0 {
                let std = (2.0 / fan_in as f64).sqrt();
                let mut rng = rng::stream(seed, Purpose::Init, 0, 0, idx as u64);
                let data = (0..rows * cols)
                    .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect();
                Matrix::new(rows, cols, data)?
            } else {
                Matrix::new(rows, cols, vec![fill; rows * cols])?
            };
            names.push(name);
            params.push(value);
        }
        let momentum = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Ok(Self {
            arch: arch.clone(),
            names,
            params,
            momentum,
            layout,
            step: 0,
            epoch: 0,
        })
    }

    pub(crate) fn from_parts(
        arch: ArchConfig,
        named: Vec<(String, Matrix, Matrix)>,
        step: u64,
        epoch: u64,
    ) -> Result<Self> {
        let template = Self::init(&arch, 0)?;
        if named.len() != template.params.len() {
            return Err(Error::ArchMismatch(format!(
                "{} tensors for an architecture with {}",
                named.len(),
                template.params.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        let mut momentum = Vec::with_capacity(named.len());
        for ((name, p, m), (expected, tp)) in named.into_iter().zip(template.names.iter().zip(&template.params)) {
            if &name != expected || p.shape() != tp.shape() || m.shape() != tp.shape() {
                return Err(Error::ArchMismatch(format!(
                    "tensor `{name}` {:?} does not match `{expected}` {:?}",
                    p.shape(),
                    tp.shape()
                )));
            }
            params.push(p);
            momentum.push(m);
        }
        Ok(Self {
            params,
            momentum,
            step,
            epoch,
            ..template
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn momentum(&self) -> &[Matrix] {
        &self.momentum
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut Matrix {
        &mut self.params[idx]
    }

    pub(crate) fn params_and_momentum_mut(&mut self) -> (&mut [Matrix], &mut [Matrix]) {
        (&mut self.params, &mut self.momentum)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().chain(&self.momentum).all(Matrix::is_finite)
    }

    /// Registers every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    fn affine(&self, tape: &mut Tape, bound: &Bound, x: Var, layer: Affine) -> Result<Var> {
        let h = tape.matmul(x, bound.var(layer.w))?;
        tape.add_bias(h, bound.var(layer.b))
    }

    pub fn encode_on(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.arch.input_dim() {
            return Err(Error::ShapeMismatch {
                left: self.arch.input_shape.clone(),
                right: vec![cols],
            });
        }
        let mut h = x;
        let geoms = self.arch.conv_geoms();
        for ((g, pool), (layer, &c)) in geoms.iter().zip(self.layout.conv.iter().zip(&self.arch.conv_channels)) {
            h = tape.conv3x3(h, bound.var(layer.w), bound.var(layer.b), *g)?;
            h = tape.relu(h)?;
            let out = ImageGeom { channels: c, ..*g };
            if *pool {
                h = tape.avg_pool2(h, out)?;
            }
        }
        if let (Some((g, pool)), Some(&c)) = (geoms.last(), self.arch.conv_channels.last()) {
            let last = ImageGeom {
                channels: c,
                height: if *pool { g.height / 2 } else { g.height },
                width: if *pool { g.width / 2 } else { g.width },
            };
            h = tape.global_avg_pool(h, last)?;
        }
        for layer in &self.layout.encoder {
            h = self.affine(tape, bound, h, *layer)?;
            h = tape.relu(h)?;
        }
        Ok(h)
    }

    pub fn classify_on(&self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<Var> {
        self.affine(tape, bound, h, self.layout.classifier)
    }

    /// Projection MLP followed by row normalisation.
    pub fn project_on(&self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<Var> {
        let mut z = h;
        for layer in &self.layout.projection {
            z = self.affine(tape, bound, z, layer.affine)?;
            if let Some((gamma, beta)) = layer.norm {
                z = tape.batch_norm(z, bound.var(gamma), bound.var(beta))?;
            }
            z = tape.relu(z)?;
        }
        z = self.affine(tape, bound, z, self.layout.projection_out)?;
        tape.l2_rows(z)
    }

    fn run(&self, input: &Matrix, f: impl FnOnce(&Self, &mut Tape, &Bound, Var) -> Result<Var>) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.constant(input.clone())?;
        let out = f(self, &mut tape, &bound, x)?;
        Ok(tape.value(out).clone())
    }

    /// `h = F(x)` for a batch of flattened inputs.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        self.run(x, |s, t, b, x| s.encode_on(t, b, x))
    }

    pub fn classify(&self, h: &Matrix) -> Result<Matrix> {
        self.run(h, |s, t, b, h| s.classify_on(t, b, h))
    }

    /// Unit-norm embeddings `z = phi(h)`.
    pub fn project(&self, h: &Matrix) -> Result<Matrix> {
        self.run(h, |s, t, b, h| s.project_on(t, b, h))
    }

    /// Class predictions (arg-max logits) for flattened inputs.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.run(x, |s, t, b, x| {
            let h = s.encode_on(t, b, x)?;
            s.classify_on(t, b, h)
        })?;
        Ok(logits
            .iter_rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

/// Exact gradients of the scalar `objective` recorded on `tape`, one entry
/// per model parameter (zeros where the objective does not depend on it).
pub fn grad(state: &ModelState, tape: &Tape, objective: Var) -> Result<Vec<Matrix>> {
    let g = tape.backward(objective)?.into_vec();
    Ok(state
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            g.get(i)
                .and_then(Clone::clone)
                .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ArchConfig {
        ArchConfig {
            input_shape: vec![3],
            conv_channels: vec![],
            encoder_hidden: vec![4],
            projection_hidden: vec![5],
            projection_dim: 2,
            projection_norm: false,
            n_classes: 3,
        }
    }

    fn batch() -> Matrix {
        Matrix::new(4, 3, vec![0.1, 0.5, -0.3, 1.0, -1.0, 0.2, 0.0, 0.3, 0.9, -0.4, 0.8, 0.6]).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelState::init(&small(), 5).unwrap();
        assert_eq!(a, ModelState::init(&small(), 5).unwrap());
        assert_ne!(a, ModelState::init(&small(), 6).unwrap());
        assert!(a.momentum().iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
        let b = a.param_index("enc0.b").unwrap();
        assert!(a.params()[b].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_count_closed_form() {
        let vector = ArchConfig::vector(16, 10);
        // enc 16*64+64, 64*64+64; cls 64*10+10; proj 64*64+64+2*64 twice; out 64*32+32
        let expected = (16 * 64 + 64) + (64 * 64 + 64) + (64 * 10 + 10) + 2 * (64 * 64 + 64 + 128) + (64 * 32 + 32);
        assert_eq!(ModelState::init(&vector, 0).unwrap().param_count(), expected);

        let image = ArchConfig::image(3, 8, 8, 5);
        // conv 8*27+8, 16*72+16, 32*144+32; enc 32*64+64; cls 64*5+5; proj as above; out
        let expected = (8 * 27 + 8) + (16 * 72 + 16) + (32 * 144 + 32) + (32 * 64 + 64) + (64 * 5 + 5)
            + 2 * (64 * 64 + 64 + 128) + (64 * 32 + 32);
        assert_eq!(ModelState::init(&image, 0).unwrap().param_count(), expected);
    }

    #[test]
    fn zero_hidden_projection_is_single_affine() {
        let mut arch = small();
        arch.projection_hidden.clear();
        let s = ModelState::init(&arch, 1).unwrap();
        assert!(s.names().iter().filter(|n| n.starts_with("proj")).eq(["proj_out.w", "proj_out.b"].iter()));
        let h = Matrix::new(1, 4, vec![0.3, -0.2, 0.5, 1.0]).unwrap();
        let w = &s.params()[s.param_index("proj_out.w").unwrap()];
        let raw = h.matmul(w).unwrap();
        let n = crate::tensor::norm(raw.data());
        let z = s.project(&h).unwrap();
        for (a, b) in z.data().iter().zip(raw.data()) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_is_batch_independent() {
        let s = ModelState::init(&small(), 2).unwrap();
        let full = s.encode(&batch()).unwrap();
        for r in 0..4 {
            let one = s.encode(&batch().select_rows(&[r])).unwrap();
            assert_eq!(one.row(0), full.row(r));
        }
        assert_eq!(s.encode(&batch()).unwrap(), full);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut arch = small();
        arch.encoder_hidden = vec![3];
        let mut s = ModelState::init(&arch, 0).unwrap();
        let w = s.param_index("enc0.w").unwrap();
        *s.param_mut(w) = Matrix::identity(3);
        let x = Matrix::new(2, 3, vec![0.1, 2.0, 0.0, 3.0, 0.5, 1.5]).unwrap();
        assert_eq!(s.encode(&x).unwrap(), x);
        assert!(s.encode(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn classifier_examples() {
        let mut s = ModelState::init(&ArchConfig { n_classes: 2, encoder_hidden: vec![2], ..small() }, 0).unwrap();
        let (w, b) = (s.param_index("cls.w").unwrap(), s.param_index("cls.b").unwrap());
        *s.param_mut(w) = Matrix::zeros(2, 2);
        let h = Matrix::new(1, 2, vec![3.0, -1.0]).unwrap();
        assert_eq!(s.classify(&h).unwrap().data(), &[0.0, 0.0]);
        // [3, -1] * [[1, 2], [3, 4]] + [0.5, -0.5] = [0.5, 1.5]
        *s.param_mut(w) = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        *s.param_mut(b) = Matrix::new(1, 2, vec![0.5, -0.5]).unwrap();
        assert_eq!(s.classify(&h).unwrap().data(), &[0.5, 1.5]);
    }

    #[test]
    fn projection_rows_are_unit_and_scale_free() {
        let mut arch = small();
        arch.projection_norm = true;
        let s = ModelState::init(&arch, 3).unwrap();
        let h = s.encode(&batch()).unwrap();
        let z = s.project(&h).unwrap();
        for row in z.iter_rows() {
            assert!((crate::tensor::norm(row) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn projection_hand_computation_one_hidden_unit() {
        let arch = ArchConfig {
            input_shape: vec![2],
            conv_channels: vec![],
            encoder_hidden: vec![2],
            projection_hidden: vec![1],
            projection_dim: 2,
            projection_norm: false,
            n_classes: 2,
        };
        let mut s = ModelState::init(&arch, 0).unwrap();
        let set = |s: &mut ModelState, name: &str, r, c, v: Vec<f64>| {
            let i = s.param_index(name).unwrap();
            *s.param_mut(i) = Matrix::new(r, c, v).unwrap();
        };
        set(&mut s, "proj0.w", 2, 1, vec![1.0, -2.0]);
        set(&mut s, "proj0.b", 1, 1, vec![0.5]);
        set(&mut s, "proj_out.w", 1, 2, vec![3.0, 4.0]);
        set(&mut s, "proj_out.b", 1, 2, vec![0.0, 0.0]);
        // hidden = relu(1*1 - 2*0.25 + 0.5) = 1; out = [3, 4] / 5
        let z = s.project(&Matrix::new(1, 2, vec![1.0, 0.25]).unwrap()).unwrap();
        assert!((z.get(0, 0) - 0.6).abs() < 1e-12);
        assert!((z.get(0, 1) - 0.8).abs() < 1e-12);
        // scaling the pre-normalisation output by c > 0 changes nothing
        set(&mut s, "proj_out.w", 1, 2, vec![6.0, 8.0]);
        let z2 = s.project(&Matrix::new(1, 2, vec![1.0, 0.25]).unwrap()).unwrap();
        assert!((z2.get(0, 0) - 0.6).abs() < 1e-12);
        // a dead hidden unit with zero bias leaves nothing to normalise
        set(&mut s, "proj0.b", 1, 1, vec![-10.0]);
        assert!(matches!(
            s.project(&Matrix::new(1, 2, vec![1.0, 0.25]).unwrap()),
            Err(Error::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn image_encoder_shapes() {
        let arch = ArchConfig::image(2, 8, 8, 4);
        let s = ModelState::init(&arch, 0).unwrap();
        let x = Matrix::new(3, 128, (0..384).map(|i| (i % 7) as f64 * 0.1).collect()).unwrap();
        assert_eq!(s.encode(&x).unwrap().shape(), (3, arch.feature_dim()));
    }

    #[test]
    fn quadratic_gradient_is_weight() {
        let s = ModelState::init(&small(), 0).unwrap();
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape).unwrap();
        let w = s.param_index("enc0.w").unwrap();
        let obj = tape.half_sum_squares(bound.var(w)).unwrap();
        let g = grad(&s, &tape, obj).unwrap();
        assert_eq!(g[w], s.params()[w]);
        assert!(g[s.param_index("cls.w").unwrap()].data().iter().all(|&v| v == 0.0));
    }
}
