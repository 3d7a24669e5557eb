//! Forward context and the basic layers shared by every module.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use autograd::{Conv2dGeometry, Gradients, Tape, Tensor, Var};
use ndarray::{ArrayD, IxDyn};

use crate::params::{Init, ParamBuilder, ParamKind, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// One forward pass: the tape, the parameters it reads, and whether layers
/// behave as in training (batch statistics, running-stat updates).
pub struct Ctx<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    train: bool,
    track_params: bool,
    vars: RefCell<HashMap<String, Var<'t>>>,
    buffer_updates: RefCell<Vec<(String, Tensor)>>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore, train: bool, track_params: bool) -> Self {
        Self {
            tape,
            store,
            train,
            track_params,
            vars: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    /// Training mode with parameter gradients.
    pub fn train(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self::new(tape, store, true, true)
    }

    /// Inference mode; nothing is differentiated.
    pub fn eval(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self::new(tape, store, false, false)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// The parameter as a tape variable; repeated lookups share one node.
    pub fn param(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.vars.borrow().get(name) {
            return *v;
        }
        let entry = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let trainable = matches!(entry.kind, ParamKind::Trainable(_));
        let value = entry.value.clone();
        let var = if self.track_params && trainable {
            self.tape.leaf_shared(value)
        } else {
            self.tape.constant_shared(value)
        };
        self.vars.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Uses `var` for parameter `name` for the rest of the pass, e.g. to
    /// differentiate with respect to externally created leaves.
    pub fn bind(&self, name: &str, var: Var<'t>) {
        self.vars.borrow_mut().insert(name.to_string(), var);
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    fn record_buffer(&self, name: &str, value: Tensor) {
        if self.train {
            self.buffer_updates.borrow_mut().push((name.to_string(), value));
        }
    }

    /// Running-statistic updates produced during the pass, in call order.
    pub fn take_buffer_updates(&self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    /// Gradients of every trainable parameter touched by the pass.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}

/// Fully connected layer; weight stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, input: usize, output: usize, bias: bool, init: Init) -> Self {
        let weight = pb.param("weight", &[input, output], init);
        let bias = bias.then(|| pb.param("bias", &[output], Init::Zeros));
        Self {
            weight,
            bias,
            in_features: input,
            out_features: output,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        let b = self.bias.as_ref().map(|b| ctx.param(b));
        x.linear(ctx.param(&self.weight), b)
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.bias.as_deref()
    }
}

/// 2-D convolution over NCHW input with square kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: String,
    bias: Option<String>,
    geo: Conv2dGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_out = output * kernel * kernel;
        let weight = pb.param(
            "weight",
            &[output, input, kernel, kernel],
            Init::KaimingFanOut(fan_out),
        );
        let bias = bias.then(|| pb.param("bias", &[output], Init::Zeros));
        Self {
            weight,
            bias,
            geo: Conv2dGeometry::new(stride, padding),
            in_channels: input,
            out_channels: output,
            kernel,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        let y = x.conv2d(ctx.param(&self.weight), self.geo);
        match &self.bias {
            Some(b) => y.add(ctx.param(b).reshape(&[1, self.out_channels, 1, 1])),
            None => y,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }
}

/// Batch normalization over axis 1 of `(B, C)` or `(B, C, H, W)` input.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    weight: String,
    bias: String,
    running_mean: String,
    running_var: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize) -> Self {
        Self::with_init(pb, channels, Init::Ones)
    }

    pub fn with_init(pb: &mut ParamBuilder<'_>, channels: usize, weight_init: Init) -> Self {
        Self {
            weight: pb.param("weight", &[channels], weight_init),
            bias: pb.param("bias", &[channels], Init::Zeros),
            running_mean: pb.buffer("running_mean", ArrayD::zeros(IxDyn(&[channels]))),
            running_var: pb.buffer("running_var", ArrayD::ones(IxDyn(&[channels]))),
            channels,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> &str {
        &self.bias
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        let ndim = x.ndim();
        let mut bshape = vec![1; ndim];
        bshape[1] = self.channels;
        let normalized = if ctx.is_train() {
            let (y, stats) = x.normalize_channels(BN_EPS);
            let rm = ctx.store().value(&self.running_mean);
            let rv = ctx.store().value(&self.running_var);
            let n = stats.count as f64;
            let unbiased = if n > 1.0 {
                stats.var.mapv(|v| v * n / (n - 1.0))
            } else {
                stats.var.clone()
            };
            let new_mean = rm.mapv(|v| v * (1.0 - BN_MOMENTUM))
                + stats.mean.mapv(|v| v * BN_MOMENTUM).into_dyn();
            let new_var =
                rv.mapv(|v| v * (1.0 - BN_MOMENTUM)) + unbiased.mapv(|v| v * BN_MOMENTUM).into_dyn();
            ctx.record_buffer(&self.running_mean, new_mean);
            ctx.record_buffer(&self.running_var, new_var);
            y
        } else {
            let rm = ctx.store().value(&self.running_mean);
            let rv = ctx.store().value(&self.running_var);
            let shift = rm.as_ref().clone().into_shape_with_order(IxDyn(&bshape)).unwrap();
            let inv = rv
                .mapv(|v| 1.0 / (v + BN_EPS).sqrt())
                .into_shape_with_order(IxDyn(&bshape))
                .unwrap();
            x.sub(ctx.constant(shift)).mul(ctx.constant(inv))
        };
        let w = ctx.param(&self.weight).reshape(&bshape);
        let b = ctx.param(&self.bias).reshape(&bshape);
        normalized.mul(w).add(b)
    }
}

/// Layer normalization over the last axis with learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: String,
    bias: String,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, width: usize) -> Self {
        Self {
            weight: pb.param("weight", &[width], Init::Ones),
            bias: pb.param("bias", &[width], Init::Zeros),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        x.normalize_last(LN_EPS)
            .mul(ctx.param(&self.weight))
            .add(ctx.param(&self.bias))
    }
}

/// Applies running-statistic updates collected by [`Ctx`].
pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<(String, Tensor)>) {
    for (name, value) in updates {
        store.set(&name, value);
    }
}
