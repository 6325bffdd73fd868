//! Teacher/student pyramid networks and the channel adapter.
//!
//! A `DetNet` is a stack of 3x3 conv + ReLU stages with 2x mean pooling
//! between pyramid taps, a minimal FPN (1x1 laterals plus a nearest-neighbour
//! top-down path) and one 1x1 classification head per scale.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::digest::digest_tensors;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Exec, Tensor};

pub const DEFAULT_SCALES: usize = 3;
pub const NUM_CLASSES: usize = 4;

/// Ordered multi-scale feature maps, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid<V>(pub Vec<V>);

pub type FeaturePyramid = Pyramid<Tensor>;

impl<V> Pyramid<V> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> core::slice::Iter<'_, V> {
        self.0.iter()
    }
}

impl FeaturePyramid {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.0.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn bit_eq(&self, other: &FeaturePyramid) -> bool {
        self.len() == other.len() && self.0.iter().zip(&other.0).all(|(a, b)| a.bit_eq(b))
    }
}

/// Geometry shared by teacher and student.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PyramidSpec {
    pub scales: usize,
    /// Pyramid channels; `None` means "same as the backbone width", which is
    /// what makes a narrow student need an adapter.
    pub channels: Option<usize>,
    /// `[C_img, H, W]`
    pub input: [usize; 3],
    pub num_classes: usize,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        PyramidSpec {
            scales: DEFAULT_SCALES,
            channels: None,
            input: [1, 32, 32],
            num_classes: NUM_CLASSES,
        }
    }
}

impl PyramidSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scales < 2 {
            return Err(Error::InvalidConfig(format!(
                "pyramid needs at least 2 scales, got {}",
                self.scales
            )));
        }
        let div = 1usize << (self.scales - 1);
        let [_, h, w] = self.input;
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidConfig(format!(
                "input {h}x{w} is not divisible by 2^{}",
                self.scales - 1
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        Ok(())
    }

    /// Spatial size `(H / 2^i, W / 2^i)` of scale `i`.
    pub fn scale_size(&self, i: usize) -> (usize, usize) {
        (self.input[1] >> i, self.input[2] >> i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

/// Weight/bias pair of a square-kernel convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn he(c_out: usize, c_in: usize, k: usize, rng: &mut Rng) -> Self {
        let std = libm::sqrt(2.0 / (c_in * k * k) as f64);
        ConvLayer {
            weight: Tensor::from_fn(&[c_out, c_in, k, k], |_| std * rng.normal()),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn apply<E: Exec>(&self, e: &mut E, bound: &BoundConv<E::Val>, x: &E::Val) -> Result<E::Val> {
        let pad = self.kernel() / 2;
        let y = e.conv2d(x, &bound.weight, 1, pad)?;
        e.add_channel_bias(&y, &bound.bias)
    }
}

/// Executor handles for one conv layer's parameters.
#[derive(Clone, Debug)]
pub struct BoundConv<V> {
    pub weight: V,
    pub bias: V,
}

/// Anything with an ordered, stable list of parameter tensors.
pub trait Parametrized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn digest(&self) -> String {
        digest_tensors(self.params())
    }

    fn set_trainable(&mut self, on: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(on);
        }
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// Convolutional pyramid network with per-scale classification heads.
#[derive(Clone, Debug, PartialEq)]
pub struct DetNet {
    pub spec: PyramidSpec,
    pub width: usize,
    pub depth: usize,
    pub role: Role,
    /// stem, `scales * depth` stage convs, `scales` laterals, `scales` heads
    layers: Vec<ConvLayer>,
}

/// A `DetNet`'s parameters brought into an executor.
#[derive(Clone, Debug)]
pub struct BoundNet<V>(Vec<BoundConv<V>>);

impl<V> BoundNet<V> {
    /// Handles in [`Parametrized::params`] order.
    pub fn handles(&self) -> impl Iterator<Item = &V> {
        self.0.iter().flat_map(|b| [&b.weight, &b.bias])
    }
}

impl DetNet {
    pub fn build(spec: PyramidSpec, width: usize, depth: usize, role: Role, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        if width < 4 {
            return Err(Error::InvalidConfig(format!("width must be >= 4, got {width}")));
        }
        if depth < 1 {
            return Err(Error::InvalidConfig("depth must be >= 1".into()));
        }
        let channels = spec.channels.unwrap_or(width);
        let m = spec.scales;
        let mut layers = Vec::with_capacity(1 + m * depth + 2 * m);
        layers.push(ConvLayer::he(width, spec.input[0], 3, rng));
        for _ in 0..m * depth {
            layers.push(ConvLayer::he(width, width, 3, rng));
        }
        for _ in 0..m {
            layers.push(ConvLayer::he(channels, width, 1, rng));
        }
        for _ in 0..m {
            layers.push(ConvLayer::he(spec.num_classes, channels, 1, rng));
        }
        let mut net = DetNet {
            spec,
            width,
            depth,
            role,
            layers,
        };
        net.set_trainable(role == Role::Student);
        Ok(net)
    }

    pub fn pyramid_channels(&self) -> usize {
        self.spec.channels.unwrap_or(self.width)
    }

    /// Marks the network as a frozen teacher.
    pub fn freeze(&mut self) {
        self.role = Role::Teacher;
        self.set_trainable(false);
    }

    fn stage(&self, scale: usize, d: usize) -> &ConvLayer {
        &self.layers[1 + scale * self.depth + d]
    }

    fn lateral_index(&self, scale: usize) -> usize {
        1 + self.spec.scales * self.depth + scale
    }

    fn head_index(&self, scale: usize) -> usize {
        1 + self.spec.scales * (self.depth + 1) + scale
    }

    pub fn bind<E: Exec>(&self, e: &mut E) -> BoundNet<E::Val> {
        BoundNet(
            self.layers
                .iter()
                .map(|l| BoundConv {
                    weight: e.input(&l.weight),
                    bias: e.input(&l.bias),
                })
                .collect(),
        )
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.spec.input {
            return Err(Error::ShapeMismatch {
                op: "forward_pyramid",
                expected: self.spec.input.to_vec(),
                found: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward_pyramid_bound<E: Exec>(
        &self,
        e: &mut E,
        bound: &BoundNet<E::Val>,
        image: &Tensor,
    ) -> Result<Pyramid<E::Val>> {
        self.check_image(image)?;
        let m = self.spec.scales;
        let x = e.input(image);
        let h = self.layers[0].apply(e, &bound.0[0], &x)?;
        let mut h = e.relu(&h);
        let mut taps = Vec::with_capacity(m);
        for s in 0..m {
            if s > 0 {
                h = e.pool2x(&h)?;
            }
            for d in 0..self.depth {
                let idx = 1 + s * self.depth + d;
                let y = self.stage(s, d).apply(e, &bound.0[idx], &h)?;
                h = e.relu(&y);
            }
            taps.push(h.clone());
        }
        let mut laterals = Vec::with_capacity(m);
        for (s, tap) in taps.iter().enumerate() {
            let idx = self.lateral_index(s);
            laterals.push(self.layers[idx].apply(e, &bound.0[idx], tap)?);
        }
        // top-down: P_{m-1} = L_{m-1}, P_s = L_s + up(P_{s+1})
        let mut levels: Vec<E::Val> = Vec::with_capacity(m);
        let mut above = laterals.pop().expect("at least two scales");
        levels.push(above.clone());
        while let Some(lat) = laterals.pop() {
            let up = e.upsample2x(&above)?;
            above = e.add(&lat, &up)?;
            levels.push(above.clone());
        }
        levels.reverse();
        Ok(Pyramid(levels))
    }

    /// Forward pass to the feature pyramid. Tracked on a graph iff the
    /// parameters require gradients.
    pub fn forward_pyramid<E: Exec>(&self, e: &mut E, image: &Tensor) -> Result<Pyramid<E::Val>> {
        let bound = self.bind(e);
        self.forward_pyramid_bound(e, &bound, image)
    }

    /// Per-scale class logits `[num_classes, H / 2^i, W / 2^i]`.
    pub fn forward_head_bound<E: Exec>(
        &self,
        e: &mut E,
        bound: &BoundNet<E::Val>,
        pyramid: &Pyramid<E::Val>,
    ) -> Result<Pyramid<E::Val>> {
        if pyramid.len() != self.spec.scales {
            return Err(Error::InvalidArgument {
                op: "forward_head",
                reason: format!("expected {} scales, got {}", self.spec.scales, pyramid.len()),
            });
        }
        let channels = self.pyramid_channels();
        let mut out = Vec::with_capacity(pyramid.len());
        for (s, level) in pyramid.iter().enumerate() {
            let c = e.value(level).shape()[0];
            if c != channels {
                return Err(Error::ShapeMismatch {
                    op: "forward_head",
                    expected: [channels].to_vec(),
                    found: [c].to_vec(),
                });
            }
            let idx = self.head_index(s);
            out.push(self.layers[idx].apply(e, &bound.0[idx], level)?);
        }
        Ok(Pyramid(out))
    }

    pub fn forward_head<E: Exec>(&self, e: &mut E, pyramid: &Pyramid<E::Val>) -> Result<Pyramid<E::Val>> {
        let bound = self.bind(e);
        self.forward_head_bound(e, &bound, pyramid)
    }

    /// Names of the tensors in [`Parametrized::params`] order.
    pub fn param_names(&self) -> Vec<String> {
        let m = self.spec.scales;
        let mut layers = Vec::with_capacity(self.layers.len());
        layers.push(String::from("stem"));
        for s in 0..m {
            for d in 0..self.depth {
                layers.push(format!("stage{s}.{d}"));
            }
        }
        layers.extend((0..m).map(|s| format!("lateral{s}")));
        layers.extend((0..m).map(|s| format!("head{s}")));
        layers
            .into_iter()
            .flat_map(|l| [format!("{l}.weight"), format!("{l}.bias")])
            .collect()
    }

    /// Head parameters of scale `s` (weight, bias), mainly for tests.
    pub fn head_mut(&mut self, s: usize) -> &mut ConvLayer {
        let idx = self.head_index(s);
        &mut self.layers[idx]
    }
}

impl Parametrized for DetNet {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Per-scale 1x1 projection from student to teacher pyramid channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    weights: Vec<Tensor>,
}

impl Adapter {
    /// Identity-initialized when channel counts agree, He-initialized otherwise.
    pub fn new(student_channels: usize, teacher_channels: usize, scales: usize, rng: &mut Rng) -> Self {
        let weights = (0..scales)
            .map(|_| {
                let w = if student_channels == teacher_channels {
                    Tensor::from_fn(&[teacher_channels, student_channels, 1, 1], |i| {
                        if i / student_channels == i % student_channels {
                            1.0
                        } else {
                            0.0
                        }
                    })
                } else {
                    let std = libm::sqrt(2.0 / student_channels as f64);
                    Tensor::from_fn(&[teacher_channels, student_channels, 1, 1], |_| std * rng.normal())
                };
                w.with_requires_grad(true)
            })
            .collect();
        Adapter { weights }
    }

    pub fn between(teacher: &DetNet, student: &DetNet, rng: &mut Rng) -> Result<Self> {
        if teacher.spec.scales != student.spec.scales {
            return Err(Error::InvalidConfig(format!(
                "teacher has {} scales, student {}",
                teacher.spec.scales, student.spec.scales
            )));
        }
        Ok(Self::new(
            student.pyramid_channels(),
            teacher.pyramid_channels(),
            student.spec.scales,
            rng,
        ))
    }

    /// True when the student's pyramid channels differ from the teacher's.
    pub fn required(teacher: &DetNet, student: &DetNet) -> bool {
        teacher.pyramid_channels() != student.pyramid_channels()
    }

    pub fn scales(&self) -> usize {
        self.weights.len()
    }

    pub fn in_channels(&self) -> usize {
        self.weights[0].shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn bind<E: Exec>(&self, e: &mut E) -> Vec<E::Val> {
        self.weights.iter().map(|w| e.input(w)).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.weights.len()).map(|s| format!("adapter{s}.weight")).collect()
    }

    pub fn adapt_bound<E: Exec>(&self, e: &mut E, bound: &[E::Val], student: &Pyramid<E::Val>) -> Result<Pyramid<E::Val>> {
        if student.len() != self.weights.len() {
            return Err(Error::InvalidArgument {
                op: "adapt",
                reason: format!("adapter has {} scales, pyramid {}", self.weights.len(), student.len()),
            });
        }
        student
            .iter()
            .zip(bound)
            .map(|(level, w)| e.conv2d(level, w, 1, 0))
            .collect::<Result<Vec<_>>>()
            .map(Pyramid)
    }

    pub fn adapt<E: Exec>(&self, e: &mut E, student: &Pyramid<E::Val>) -> Result<Pyramid<E::Val>> {
        let bound = self.bind(e);
        self.adapt_bound(e, &bound, student)
    }
}

impl Parametrized for Adapter {
    fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Eager, Graph};

    fn spec() -> PyramidSpec {
        PyramidSpec {
            input: [1, 8, 8],
            ..PyramidSpec::default()
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = DetNet::build(spec(), 8, 2, Role::Student, &mut Rng::new(4)).unwrap();
        let b = DetNet::build(spec(), 8, 2, Role::Student, &mut Rng::new(4)).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.bit_eq(y)));
        let c = DetNet::build(spec(), 8, 2, Role::Student, &mut Rng::new(5)).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn build_rejects_bad_specs() {
        let mut r = Rng::new(0);
        let odd = PyramidSpec { input: [1, 6, 8], ..spec() };
        assert!(DetNet::build(odd, 8, 1, Role::Student, &mut r).is_err());
        let one_scale = PyramidSpec { scales: 1, ..spec() };
        assert!(DetNet::build(one_scale, 8, 1, Role::Student, &mut r).is_err());
        assert!(DetNet::build(spec(), 3, 1, Role::Student, &mut r).is_err());
        assert!(DetNet::build(spec(), 4, 0, Role::Student, &mut r).is_err());
    }

    #[test]
    fn pyramid_and_head_shapes() {
        let net = DetNet::build(spec(), 6, 1, Role::Teacher, &mut Rng::new(1)).unwrap();
        let img = Tensor::full(&[1, 8, 8], 0.5);
        let p = net.forward_pyramid(&mut Eager, &img).unwrap();
        assert_eq!(p.len(), DEFAULT_SCALES);
        assert_eq!(p.shapes(), [[6, 8, 8], [6, 4, 4], [6, 2, 2]]);
        let logits = net.forward_head(&mut Eager, &p).unwrap();
        assert_eq!(logits.shapes(), [[4, 8, 8], [4, 4, 4], [4, 2, 2]]);
        assert!(net.forward_pyramid(&mut Eager, &Tensor::zeros(&[1, 4, 4])).is_err());
        let wrong = Pyramid(alloc::vec![Tensor::zeros(&[5, 8, 8]), Tensor::zeros(&[5, 4, 4]), Tensor::zeros(&[5, 2, 2])]);
        assert!(net.forward_head(&mut Eager, &wrong).is_err());
    }

    #[test]
    fn teacher_forward_records_nothing() {
        let net = DetNet::build(spec(), 4, 1, Role::Teacher, &mut Rng::new(1)).unwrap();
        let mut g = Graph::new();
        net.forward_pyramid(&mut g, &Tensor::full(&[1, 8, 8], 0.3)).unwrap();
        assert_eq!(g.tracked_len(), 0);
        let student = DetNet::build(spec(), 4, 1, Role::Student, &mut Rng::new(1)).unwrap();
        let mut g = Graph::new();
        let p = student.forward_pyramid(&mut g, &Tensor::full(&[1, 8, 8], 0.3)).unwrap();
        assert!(p.iter().all(|v| g.is_tracked(*v)));
    }

    #[test]
    fn zero_image_gives_zero_pyramid() {
        let net = DetNet::build(spec(), 4, 2, Role::Teacher, &mut Rng::new(2)).unwrap();
        let p = net.forward_pyramid(&mut Eager, &Tensor::zeros(&[1, 8, 8])).unwrap();
        assert!(p.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn adapter_identity_and_projection() {
        let mut r = Rng::new(3);
        let same = Adapter::new(4, 4, 3, &mut r);
        let student = DetNet::build(spec(), 4, 1, Role::Student, &mut Rng::new(9)).unwrap();
        let p = student.forward_pyramid(&mut Eager, &Tensor::full(&[1, 8, 8], 0.7)).unwrap();
        assert!(same.adapt(&mut Eager, &p).unwrap().bit_eq(&p));

        let teacher = DetNet::build(spec(), 8, 1, Role::Teacher, &mut Rng::new(9)).unwrap();
        assert!(Adapter::required(&teacher, &student));
        let proj = Adapter::between(&teacher, &student, &mut r).unwrap();
        let out = proj.adapt(&mut Eager, &p).unwrap();
        assert_eq!(out.shapes(), [[8, 8, 8], [8, 4, 4], [8, 2, 2]]);
        let short = Pyramid(p.0[..2].to_vec());
        assert!(proj.adapt(&mut Eager, &short).is_err());
    }
}
