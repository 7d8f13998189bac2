//! Three-level 3D U-Net generator taking `(asl, prior)` and returning a
//! single-channel volume, optionally as a residual on the ASL channel.

use std::collections::HashMap;

use ndarray::{s, Array3, Array4, ArrayD, ArrayView1, ArrayView5, Axis, Ix1, Ix5, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops;
use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::volume::{Shape3, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Resolution levels; `levels - 1` poolings.
    pub levels: usize,
    pub base_width: usize,
    pub kernel: usize,
    /// Leaky ReLU slope for negative inputs.
    pub slope: f64,
    /// Output is `asl + network(asl, prior)` when set.
    pub residual: bool,
    /// Start the output convolution at zero, so a residual generator begins
    /// as the identity on its ASL input.
    pub zero_init_output: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            in_channels: 2,
            out_channels: 1,
            levels: 3,
            base_width: 16,
            kernel: 3,
            slope: 0.2,
            residual: true,
            zero_init_output: true,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("generator: {m}")));
        if self.in_channels != 2 {
            return bad(format!("in_channels must be 2 (asl, prior), got {}", self.in_channels));
        }
        if self.out_channels != 1 {
            return bad(format!("out_channels must be 1, got {}", self.out_channels));
        }
        if self.levels == 0 || self.levels > 6 {
            return bad(format!("levels must be in 1..=6, got {}", self.levels));
        }
        if self.base_width == 0 {
            return bad("base_width must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if !(self.slope.is_finite() && self.slope >= 0.0) {
            return bad(format!("slope must be finite and >= 0, got {}", self.slope));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial extents are padded up to a multiple of this before the net.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// `(name, shape)` of every tensor, in parameter order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel;
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, bias: bool| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k, k]));
            if bias {
                out.push((format!("{name}.bias"), vec![cout]));
            }
        };
        for l in 0..self.levels {
            let cin = if l == 0 { self.in_channels } else { self.width(l - 1) };
            conv(format!("enc{l}.conv1"), self.width(l), cin, false);
            conv(format!("enc{l}.conv2"), self.width(l), self.width(l), false);
        }
        for l in (0..self.levels - 1).rev() {
            conv(
                format!("dec{l}.conv1"),
                self.width(l),
                self.width(l + 1) + self.width(l),
                true,
            );
            conv(format!("dec{l}.conv2"), self.width(l), self.width(l), true);
        }
        conv("out".into(), self.out_channels, self.width(0), true);
        out
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Uniform `+-1/sqrt(fan_in)` initialization for a layout.
pub(crate) fn init_params(layout: &[(String, Vec<usize>)], seed: u64, zero: impl Fn(&str) -> bool) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let mut fan_in = 1usize;
    for (name, shape) in layout {
        if shape.len() == 5 {
            fan_in = shape[1..].iter().product();
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut value = ArrayD::zeros(IxDyn(shape));
        // draw even when zeroing so later tensors do not depend on the flag
        for v in value.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
        if zero(name) {
            value.fill(0.0);
        }
        params.push(name.clone(), value);
    }
    params
}

pub(crate) fn weight_view<'a>(params: &'a ParamSet, name: &str) -> ArrayView5<'a, f64> {
    params
        .get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .view()
        .into_dimensionality::<Ix5>()
        .expect("rank-5 weight")
}

pub(crate) fn bias_view<'a>(params: &'a ParamSet, name: &str) -> ArrayView1<'a, f64> {
    params
        .get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .view()
        .into_dimensionality::<Ix1>()
        .expect("rank-1 bias")
}

/// Layer vocabulary shared by inference and training passes.
trait Backend {
    type T;
    fn conv(&mut self, x: &Self::T, w: &str, b: Option<&str>) -> Self::T;
    fn norm(&mut self, x: &Self::T) -> Self::T;
    fn lrelu(&mut self, x: &Self::T, slope: f64) -> Self::T;
    fn pool(&mut self, x: &Self::T) -> Self::T;
    fn up(&mut self, x: &Self::T) -> Self::T;
    fn concat(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
}

struct Eager<'a> {
    params: &'a ParamSet,
    /// Signs of every leaky-relu input, when requested.
    signs: Option<Vec<bool>>,
}

impl Backend for Eager<'_> {
    type T = Array4<f64>;

    fn conv(&mut self, x: &Array4<f64>, w: &str, b: Option<&str>) -> Array4<f64> {
        let bias = b.map(|b| bias_view(self.params, b));
        ops::conv3d(x.view(), weight_view(self.params, w), bias, 1)
    }

    fn norm(&mut self, x: &Array4<f64>) -> Array4<f64> {
        ops::instance_norm(x.view()).0
    }

    fn lrelu(&mut self, x: &Array4<f64>, slope: f64) -> Array4<f64> {
        if let Some(s) = &mut self.signs {
            s.extend(x.iter().map(|&v| v > 0.0));
        }
        ops::leaky_relu(x.view(), slope)
    }

    fn pool(&mut self, x: &Array4<f64>) -> Array4<f64> {
        ops::avg_pool2(x.view())
    }

    fn up(&mut self, x: &Array4<f64>) -> Array4<f64> {
        ops::upsample2(x.view())
    }

    fn concat(&mut self, a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
        ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("concat shapes")
    }
}

struct Recording {
    tape: Tape,
    vars: HashMap<String, Var>,
}

impl Backend for Recording {
    type T = Var;

    fn conv(&mut self, x: &Var, w: &str, b: Option<&str>) -> Var {
        let w = self.vars[w];
        let b = b.map(|b| self.vars[b]);
        self.tape.conv(*x, w, b, 1)
    }

    fn norm(&mut self, x: &Var) -> Var {
        self.tape.instance_norm(*x)
    }

    fn lrelu(&mut self, x: &Var, slope: f64) -> Var {
        self.tape.leaky_relu(*x, slope)
    }

    fn pool(&mut self, x: &Var) -> Var {
        self.tape.avg_pool(*x)
    }

    fn up(&mut self, x: &Var) -> Var {
        self.tape.upsample(*x)
    }

    fn concat(&mut self, a: &Var, b: &Var) -> Var {
        self.tape.concat(*a, *b)
    }
}

fn unet<B: Backend>(spec: &GeneratorSpec, b: &mut B, input: B::T) -> B::T {
    let slope = spec.slope;
    let enc = |b: &mut B, x: &B::T, l: usize| {
        let h = b.conv(x, &format!("enc{l}.conv1.weight"), None);
        let h = b.norm(&h);
        let h = b.lrelu(&h, slope);
        let h = b.conv(&h, &format!("enc{l}.conv2.weight"), None);
        let h = b.norm(&h);
        b.lrelu(&h, slope)
    };
    let mut skips: Vec<B::T> = Vec::with_capacity(spec.levels);
    let mut h = enc(b, &input, 0);
    drop(input);
    for l in 1..spec.levels {
        skips.push(h);
        let p = b.pool(skips.last().expect("just pushed"));
        h = enc(b, &p, l);
    }
    for l in (0..spec.levels - 1).rev() {
        let u = b.up(&h);
        let skip = skips.pop().expect("one skip per level");
        let c = b.concat(&u, &skip);
        let d = b.conv(&c, &format!("dec{l}.conv1.weight"), Some(&format!("dec{l}.conv1.bias")));
        let d = b.lrelu(&d, slope);
        let d = b.conv(&d, &format!("dec{l}.conv2.weight"), Some(&format!("dec{l}.conv2.bias")));
        h = b.lrelu(&d, slope);
    }
    b.conv(&h, "out.weight", Some("out.bias"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    spec: GeneratorSpec,
    params: ParamSet,
    seed: u64,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = init_params(&spec.layout(), seed, |n| spec.zero_init_output && n.starts_with("out."));
        Ok(Self { spec, params, seed })
    }

    /// Rebuild from stored parameters, checking them against the layout of `spec`.
    pub fn from_params(spec: GeneratorSpec, seed: u64, params: ParamSet) -> Result<Self> {
        let mut g = Self::new(spec, seed)?;
        g.inherit_params(&params)?;
        Ok(g)
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Toggle the residual connection; parameters are unaffected.
    pub fn set_residual(&mut self, on: bool) {
        self.spec.residual = on;
    }

    /// Copy a parent's parameters; fails without modification on mismatch.
    pub fn inherit_params(&mut self, parent: &ParamSet) -> Result<()> {
        self.params.copy_from(parent)
    }

    fn check_inputs(asl: &Array3<f64>, prior: &Array3<f64>) -> Result<()> {
        if asl.shape() != prior.shape() {
            return Err(Error::Geometry(format!(
                "generator inputs disagree: asl {:?}, prior {:?}",
                asl.shape(),
                prior.shape()
            )));
        }
        Ok(())
    }

    fn padding(&self, shape: Shape3) -> [usize; 3] {
        let m = self.spec.size_multiple();
        shape.map(|n| n.div_ceil(m) * m - n)
    }

    fn padded_input(&self, asl: &Array3<f64>, prior: &Array3<f64>) -> (Array4<f64>, Array4<f64>) {
        let pad = self.padding(shape_of(asl));
        let a = ops::pad_replicate(asl.view().insert_axis(Axis(0)), [0; 3], pad);
        let p = ops::pad_replicate(prior.view().insert_axis(Axis(0)), [0; 3], pad);
        (a, p)
    }

    /// Inference pass on raw grids of any shape.
    pub fn forward(&self, asl: &Array3<f64>, prior: &Array3<f64>) -> Result<Array3<f64>> {
        Self::check_inputs(asl, prior)?;
        let shape = shape_of(asl);
        let (a, p) = self.padded_input(asl, prior);
        let input = ndarray::concatenate(Axis(0), &[a.view(), p.view()]).expect("same shape");
        drop(p);
        let mut out = unet(
            &self.spec,
            &mut Eager {
                params: &self.params,
                signs: None,
            },
            input,
        );
        if self.spec.residual {
            out += &a;
        }
        let out = crop(out, shape);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotFinite("generator output".into()));
        }
        Ok(out)
    }

    /// Which side of zero each leaky-relu input falls on. Finite-difference
    /// checks use it to discard steps that cross a kink.
    pub fn activation_pattern(&self, asl: &Array3<f64>, prior: &Array3<f64>) -> Result<Vec<bool>> {
        Self::check_inputs(asl, prior)?;
        let (a, p) = self.padded_input(asl, prior);
        let input = ndarray::concatenate(Axis(0), &[a.view(), p.view()]).expect("same shape");
        let mut eager = Eager {
            params: &self.params,
            signs: Some(Vec::new()),
        };
        unet(&self.spec, &mut eager, input);
        Ok(eager.signs.unwrap_or_default())
    }

    /// Inference on volumes; the output takes the ASL input's geometry.
    pub fn forward_volume(&self, asl: &Volume3D, prior: &Volume3D) -> Result<Volume3D> {
        let out = self.forward(asl.data(), prior.data())?;
        asl.with_data(out)
    }

    /// Recorded pass for training. Gradients flow to the parameters and to
    /// the ASL input.
    pub fn forward_train(&self, asl: &Array3<f64>, prior: &Array3<f64>) -> Result<GeneratorPass> {
        Self::check_inputs(asl, prior)?;
        let shape = shape_of(asl);
        let pad = self.padding(shape);
        let (a, p) = self.padded_input(asl, prior);
        let mut rec = Recording {
            tape: Tape::new(),
            vars: HashMap::new(),
        };
        let mut param_vars = Vec::with_capacity(self.params.len());
        for t in self.params.iter() {
            let v = rec.tape.leaf(t.value.clone(), true);
            rec.vars.insert(t.name.clone(), v);
            param_vars.push(v);
        }
        let asl_var = rec.tape.leaf(a.into_dyn(), true);
        let prior_var = rec.tape.leaf(p.into_dyn(), false);
        let input = rec.tape.concat(asl_var, prior_var);
        let mut root = unet(&self.spec, &mut rec, input);
        if self.spec.residual {
            root = rec.tape.add(root, asl_var);
        }
        let full = rec.tape.v4(root).to_owned();
        let output = crop(full, shape);
        Ok(GeneratorPass {
            tape: rec.tape,
            root,
            param_vars,
            asl_var,
            template: self.params.zeros_like(),
            output,
            pad,
        })
    }
}

fn shape_of(a: &Array3<f64>) -> Shape3 {
    let (x, y, z) = a.dim();
    [x, y, z]
}

fn crop(a: Array4<f64>, shape: Shape3) -> Array3<f64> {
    let c = a.slice(s![0, ..shape[0], ..shape[1], ..shape[2]]);
    if c.shape() == &a.shape()[1..] {
        a.index_axis_move(Axis(0), 0)
    } else {
        c.to_owned()
    }
}

/// A recorded generator evaluation awaiting an output gradient.
pub struct GeneratorPass {
    tape: Tape,
    root: Var,
    param_vars: Vec<Var>,
    asl_var: Var,
    template: ParamSet,
    output: Array3<f64>,
    pad: [usize; 3],
}

impl GeneratorPass {
    pub fn output(&self) -> &Array3<f64> {
        &self.output
    }

    /// Pull `d loss / d output` back to `(d loss / d params, d loss / d asl)`.
    pub fn backward(&self, grad_out: &Array3<f64>) -> (ParamSet, Array3<f64>) {
        assert_eq!(grad_out.shape(), self.output.shape(), "output gradient shape");
        let (nx, ny, nz) = grad_out.dim();
        let [px, py, pz] = self.pad;
        let mut seed = Array4::zeros((1, nx + px, ny + py, nz + pz));
        seed.slice_mut(s![0, ..nx, ..ny, ..nz]).assign(grad_out);
        let mut grads = self.tape.backward(self.root, seed.into_dyn());
        let mut out = self.template.clone();
        for (t, &v) in out.iter_mut().zip(&self.param_vars) {
            if let Some(g) = grads.take(v) {
                t.value = g;
            }
        }
        let asl = match grads.take(self.asl_var) {
            Some(g) => {
                let g4 = g.into_dimensionality::<ndarray::Ix4>().expect("rank-4 gradient");
                ops::pad_replicate_adjoint(g4.view(), [0; 3], self.pad).index_axis_move(Axis(0), 0)
            }
            None => Array3::zeros(grad_out.raw_dim()),
        };
        (out, asl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn noise(shape: Shape3, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
    }

    fn small(width: usize) -> GeneratorSpec {
        GeneratorSpec {
            base_width: width,
            zero_init_output: false,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn deterministic_init() {
        let a = Generator::new(GeneratorSpec::default(), 3).unwrap();
        let b = Generator::new(GeneratorSpec::default(), 3).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Generator::new(GeneratorSpec::default(), 4).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // widths 16, 32, 64; encoder convs carry no bias
        let w = |c: usize, i: usize| c * i * 27;
        let enc = w(16, 2) + w(16, 16) + w(32, 16) + w(32, 32) + w(64, 32) + w(64, 64);
        let dec = w(32, 96) + 32 + w(32, 32) + 32 + w(16, 48) + 16 + w(16, 16) + 16;
        let out = w(1, 16) + 1;
        assert_eq!(GeneratorSpec::default().num_params(), enc + dec + out);
        let g = Generator::new(GeneratorSpec::default(), 0).unwrap();
        assert_eq!(g.params().num_scalars(), enc + dec + out);
    }

    #[test]
    fn doubling_width_roughly_quadruples_weights() {
        let ratio = small(32).num_params() as f64 / small(16).num_params() as f64;
        assert!((3.8..=4.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn shape_preserved_for_awkward_extents() {
        let g = Generator::new(small(4), 1).unwrap();
        let asl = noise([12, 20, 8], 1);
        let prior = noise([12, 20, 8], 2);
        assert_eq!(g.forward(&asl, &prior).unwrap().dim(), (12, 20, 8));
        let odd = noise([5, 7, 9], 3);
        assert_eq!(g.forward(&odd, &odd).unwrap().dim(), (5, 7, 9));
    }

    #[test]
    fn zero_output_layer_is_identity_on_asl() {
        let g = Generator::new(
            GeneratorSpec {
                base_width: 4,
                ..Default::default()
            },
            9,
        )
        .unwrap();
        let asl = noise([16, 16, 16], 4);
        let prior = noise([16, 16, 16], 5);
        assert_eq!(g.forward(&asl, &prior).unwrap(), asl);
        let pass = g.forward_train(&asl, &prior).unwrap();
        assert_eq!(pass.output(), &asl);
    }

    #[test]
    fn mismatched_inputs_are_a_geometry_error() {
        let g = Generator::new(small(2), 0).unwrap();
        let err = g.forward(&noise([8, 8, 8], 0), &noise([8, 8, 4], 0)).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
    }

    #[test]
    fn eager_and_recorded_passes_agree() {
        let g = Generator::new(small(4), 2).unwrap();
        let asl = noise([8, 12, 6], 6);
        let prior = noise([8, 12, 6], 7);
        let eager = g.forward(&asl, &prior).unwrap();
        let rec = g.forward_train(&asl, &prior).unwrap();
        let diff = (&eager - rec.output()).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut g = Generator::new(small(4), 11).unwrap();
        let asl = noise([8, 8, 8], 8);
        let prior = noise([8, 8, 8], 9);
        let weights = noise([8, 8, 8], 10);
        let objective = |g: &Generator| (&g.forward(&asl, &prior).unwrap() * &weights).sum();
        let (grads, asl_grad) = g.forward_train(&asl, &prior).unwrap().backward(&weights);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = g.params().num_scalars();
        // small enough not to cross a leaky-relu kink
        let eps = 1e-5;
        for _ in 0..12 {
            let i = rng.random_range(0..n);
            let orig = g.params().flat(i);
            g.params_mut().set_flat(i, orig + eps);
            let up = objective(&g);
            g.params_mut().set_flat(i, orig - eps);
            let down = objective(&g);
            g.params_mut().set_flat(i, orig);
            let fd = (up - down) / (2.0 * eps);
            let an = grads.flat(i);
            let tol = 1e-3 * fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() <= tol,
                "{}: fd {fd} analytic {an}",
                g.params().flat_owner(i)
            );
        }
        // input gradient at one voxel
        let mut bumped = asl.clone();
        bumped[[3, 4, 5]] += eps;
        let up = (&g.forward(&bumped, &prior).unwrap() * &weights).sum();
        bumped[[3, 4, 5]] -= 2.0 * eps;
        let down = (&g.forward(&bumped, &prior).unwrap() * &weights).sum();
        let fd = (up - down) / (2.0 * eps);
        assert!(
            (fd - asl_grad[[3, 4, 5]]).abs() <= 1e-3 * fd.abs().max(1e-6),
            "{fd} vs {}",
            asl_grad[[3, 4, 5]]
        );
    }

    #[test]
    fn inheritance_copies_and_isolates() {
        let parent = Generator::new(small(4), 1).unwrap();
        let mut child = Generator::new(small(4), 2).unwrap();
        child.inherit_params(parent.params()).unwrap();
        let x = noise([8, 8, 8], 0);
        assert_eq!(child.forward(&x, &x).unwrap(), parent.forward(&x, &x).unwrap());
        let before = parent.params().checksum();
        child.params_mut().set_flat(0, 42.0);
        assert_eq!(parent.params().checksum(), before);

        let mut wide = Generator::new(small(8), 2).unwrap();
        assert!(matches!(wide.inherit_params(parent.params()), Err(Error::Spec(_))));
    }
}
