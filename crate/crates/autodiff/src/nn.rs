//! Parameter storage and the handful of layers the models are built from.
//!
//! Layers hold parameter *names*; a forward pass looks them up in a
//! [`Bound`] set, which turns each stored tensor into a graph leaf.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand::Rng;

use crate::error::{Result, ShapeError};
use crate::tensor::{Tensor, GATHER_ZERO};
use crate::var::{grad, Var};

/// Named parameter tensors in a deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let prev = self.params.insert(name.clone(), value);
        assert!(prev.is_none(), "parameter `{name}` registered twice");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Replaces every tensor with the same-named one from `other`, checking shapes.
    pub fn load_from(&mut self, other: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let src = other.get(name).ok_or_else(|| ShapeError::UnknownParam(name.clone()))?;
            if src.shape() != t.shape() {
                return Err(ShapeError::ParamShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    got: src.shape().to_vec(),
                });
            }
            *t = src.clone();
        }
        Ok(())
    }

    /// Makes graph leaves for every parameter. With `trainable = false` the
    /// values enter the graph as constants.
    pub fn bind(&self, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { Var::leaf(t.clone()) } else { Var::constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// A parameter set bound into one computation graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> &Var {
        self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradient of `loss` with respect to every bound parameter (zeros where
    /// the loss does not depend on it).
    pub fn grads(&self, loss: &Var) -> BTreeMap<String, Tensor> {
        let leaves: Vec<Var> = self.vars.values().cloned().collect();
        let gs = grad(loss, &leaves, false);
        self.vars
            .iter()
            .zip(gs)
            .map(|((name, v), g)| {
                let t = g.map(|g| g.value().clone()).unwrap_or_else(|| Tensor::zeros(v.shape()));
                (name.clone(), t)
            })
            .collect()
    }
}

/// Initialization options for [`Linear`], following the equalized learning
/// rate scheme: weights are stored at unit scale and multiplied by
/// `lr_mult / sqrt(fan_in)` at runtime.
#[derive(Clone, Copy, Debug)]
pub struct LinearInit {
    pub bias: bool,
    pub bias_init: f64,
    pub lr_mult: f64,
    pub zero_weight: bool,
    /// Multiplies the initial weights (not the runtime gain).
    pub init_scale: f64,
}

impl Default for LinearInit {
    fn default() -> Self {
        Self { bias: true, bias_init: 0.0, lr_mult: 1.0, zero_weight: false, init_scale: 1.0 }
    }
}

/// Fully connected layer acting on the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
    weight_gain: f64,
    bias_gain: f64,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: LinearInit,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = format!("{name}.weight");
        let w = if init.zero_weight {
            Tensor::zeros(&[in_dim, out_dim])
        } else {
            Tensor::randn(&[in_dim, out_dim], rng).map(|x| x * init.init_scale / init.lr_mult)
        };
        store.insert(weight.clone(), w);
        let bias = init.bias.then(|| {
            let b = format!("{name}.bias");
            store.insert(b.clone(), Tensor::full(&[out_dim], init.bias_init / init.lr_mult));
            b
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
            weight_gain: init.lr_mult / (in_dim as f64).sqrt(),
            bias_gain: init.lr_mult,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        let shape = x.shape().to_vec();
        assert_eq!(shape.last(), Some(&self.in_dim), "Linear {}: input {shape:?}", self.weight);
        let rows = x.value().numel() / self.in_dim;
        let x2 = if shape.len() == 2 { x.clone() } else { x.reshape(&[rows, self.in_dim]) };
        let w = p.get(&self.weight).mul_scalar(self.weight_gain);
        let mut y = x2.matmul(&w);
        if let Some(b) = &self.bias {
            y = y.add(&p.get(b).mul_scalar(self.bias_gain));
        }
        if shape.len() == 2 {
            y
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.out_dim;
            y.reshape(&out)
        }
    }
}

thread_local! {
    static IM2COL_CACHE: RefCell<HashMap<[usize; 5], Rc<Vec<u32>>>> = RefCell::new(HashMap::new());
}

/// Gather map turning an NHWC tensor into `k×k` patches (zero padded,
/// stride 1, "same" output size): rows are pixels, columns are
/// `(dy, dx, channel)`.
pub fn im2col_map(b: usize, h: usize, w: usize, c: usize, k: usize) -> Rc<Vec<u32>> {
    let key = [b, h, w, c, k];
    if let Some(m) = IM2COL_CACHE.with(|cache| cache.borrow().get(&key).cloned()) {
        return m;
    }
    let pad = (k / 2) as isize;
    let mut map = Vec::with_capacity(b * h * w * k * k * c);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                for dy in 0..k {
                    for dx in 0..k {
                        let sy = y as isize + dy as isize - pad;
                        let sx = x as isize + dx as isize - pad;
                        let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                        for ci in 0..c {
                            map.push(if inside {
                                (((bi * h + sy as usize) * w + sx as usize) * c + ci) as u32
                            } else {
                                GATHER_ZERO
                            });
                        }
                    }
                }
            }
        }
    }
    let map = Rc::new(map);
    IM2COL_CACHE.with(|cache| cache.borrow_mut().insert(key, map.clone()));
    map
}

/// Square convolution over NHWC input, stride 1, same padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub linear: Linear,
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let init = LinearInit { bias, ..Default::default() };
        let linear = Linear::new(store, name, kernel * kernel * in_ch, out_ch, init, rng);
        Self { linear, kernel, in_ch, out_ch }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        let s = x.shape();
        assert_eq!(s.len(), 4, "Conv2d expects NHWC input");
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        assert_eq!(c, self.in_ch);
        let rows = b * h * w;
        let cols = if self.kernel == 1 {
            x.reshape(&[rows, c])
        } else {
            let map = im2col_map(b, h, w, c, self.kernel);
            x.gather(&map, &[rows, self.kernel * self.kernel * c])
        };
        self.linear.forward(p, &cols).reshape(&[b, h, w, self.out_ch])
    }
}

/// 2×2 average pooling over NHWC input.
pub fn avg_pool2(x: &Var) -> Var {
    let s = x.shape().to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    x.reshape(&[b, h / 2, 2, w / 2, 2, c]).sum_axis(4).sum_axis(2).reshape(&[b, h / 2, w / 2, c]).mul_scalar(0.25)
}
