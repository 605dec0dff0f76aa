use crate::error::{shape_err, Error, Result};
use crate::scalar::{matmul, matmul_at, matmul_bt, Real};
use crate::tensor::DenseTensor;
use crate::ttlayers::{DenseConvLayer, TTConvLayer, TtCache};

use super::batchnorm::{BatchNorm, BnCache, BnStats};
use super::lif::{Gate, LIFParams};

/// A convolution in either dense or TT-factored form.
#[derive(Clone, Debug, PartialEq)]
pub enum ConvOp<T = f32> {
    Dense(DenseConvLayer<T>),
    Tt(TTConvLayer<T>),
}

enum OpCache<T> {
    Dense,
    Tt(TtCache<T>),
}

impl<T: Real> ConvOp<T> {
    pub fn in_channels(&self) -> usize {
        match self {
            ConvOp::Dense(l) => l.in_channels(),
            ConvOp::Tt(l) => l.in_channels(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            ConvOp::Dense(l) => l.out_channels(),
            ConvOp::Tt(l) => l.out_channels(),
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            ConvOp::Dense(l) => l.geometry.stride,
            ConvOp::Tt(l) => l.stride,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            ConvOp::Dense(l) => l.num_params(),
            ConvOp::Tt(l) => l.num_params(),
        }
    }

    pub fn forward(&self, x: &DenseTensor<T>, t: usize) -> Result<DenseTensor<T>> {
        match self {
            ConvOp::Dense(l) => l.forward(x),
            ConvOp::Tt(l) => l.forward(x, t),
        }
    }

    fn forward_cached(&self, x: &DenseTensor<T>, t: usize) -> Result<(DenseTensor<T>, OpCache<T>)> {
        match self {
            ConvOp::Dense(l) => Ok((l.forward(x)?, OpCache::Dense)),
            ConvOp::Tt(l) => {
                let (y, c) = l.forward_cached(x, t)?;
                Ok((y, OpCache::Tt(c)))
            }
        }
    }

    fn backward(
        &self,
        x: &DenseTensor<T>,
        cache: &OpCache<T>,
        dy: &DenseTensor<T>,
    ) -> Result<(DenseTensor<T>, Vec<DenseTensor<T>>)> {
        let (dx, grads) = match (self, cache) {
            (ConvOp::Dense(l), OpCache::Dense) => {
                let (dx, dw) = l.backward(x, dy, true)?;
                (dx, vec![dw])
            }
            (ConvOp::Tt(l), OpCache::Tt(c)) => {
                let (dx, g) = l.backward(c, dy, true)?;
                (dx, vec![g.w1, g.w2, g.w3, g.w4])
            }
            _ => return Err(Error::Contract("recorded cache does not match the layer kind".into())),
        };
        Ok((dx.expect("requested"), grads))
    }

    pub fn params(&self) -> Vec<&DenseTensor<T>> {
        match self {
            ConvOp::Dense(l) => vec![&l.weight],
            ConvOp::Tt(l) => vec![&l.cores.w1, &l.cores.w2, &l.cores.w3, &l.cores.w4],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseTensor<T>> {
        match self {
            ConvOp::Dense(l) => vec![&mut l.weight],
            ConvOp::Tt(l) => vec![&mut l.cores.w1, &mut l.cores.w2, &mut l.cores.w3, &mut l.cores.w4],
        }
    }

    fn param_suffixes(&self) -> &'static [&'static str] {
        match self {
            ConvOp::Dense(_) => &["weight"],
            ConvOp::Tt(_) => &["w1", "w2", "w3", "w4"],
        }
    }

    /// Dense equivalent of this op (identity for dense ops).
    pub fn merged(&self) -> Result<ConvOp<T>> {
        match self {
            ConvOp::Dense(l) => Ok(ConvOp::Dense(l.clone())),
            ConvOp::Tt(l) => Ok(ConvOp::Dense(l.to_dense_layer()?)),
        }
    }
}

/// `LIF -> BN -> conv`, the repeating unit of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Unit<T = f32> {
    pub bn: BatchNorm<T>,
    pub conv: ConvOp<T>,
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Block<T = f32> {
    Plain(Unit<T>),
    /// Two units with a skip connection. The optional projection shortcut consumes the
    /// normalised spikes of the first unit; otherwise the block input is added unchanged.
    Residual {
        a: Unit<T>,
        b: Unit<T>,
        shortcut: Option<DenseConvLayer<T>>,
    },
}

impl<T: Real> Block<T> {
    fn units(&self) -> Vec<&Unit<T>> {
        match self {
            Block::Plain(u) => vec![u],
            Block::Residual { a, b, .. } => vec![a, b],
        }
    }

    fn units_mut(&mut self) -> Vec<&mut Unit<T>> {
        match self {
            Block::Plain(u) => vec![u],
            Block::Residual { a, b, .. } => vec![a, b],
        }
    }
}

/// Fully connected classifier over globally average-pooled spikes.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: DenseTensor<T>,
    pub bias: DenseTensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.weight.shape()[1]
    }

    fn forward(&self, pooled: &DenseTensor<T>) -> DenseTensor<T> {
        let (n, k, c) = (pooled.shape()[0], self.classes(), self.features());
        let mut y = vec![T::zero(); n * k];
        for row in y.chunks_mut(k) {
            row.copy_from_slice(self.bias.data());
        }
        matmul_bt(n, c, k, pooled.data(), self.weight.data(), &mut y, true);
        DenseTensor::new(vec![n, k], y).expect("shape")
    }
}

struct LifRec<T> {
    u_pre: DenseTensor<T>,
    out: DenseTensor<T>,
}

struct UnitRec<T> {
    lif: LifRec<T>,
    bn: BnCache<T>,
    bn_out: DenseTensor<T>,
    conv: OpCache<T>,
}

struct StepRec<T> {
    blocks: Vec<Vec<UnitRec<T>>>,
    head_lif: LifRec<T>,
    pooled: DenseTensor<T>,
}

/// Everything the reverse pass needs from one training-mode forward pass.
pub struct Tape<T> {
    input: DenseTensor<T>,
    copies: usize,
    stem_out: Vec<DenseTensor<T>>,
    steps: Vec<StepRec<T>>,
}

impl<T: Real> Tape<T> {
    pub fn timesteps(&self) -> usize {
        self.steps.len()
    }

    /// Every recorded LIF output, timestep-major, layers in forward order.
    pub fn spike_maps(&self) -> Vec<&DenseTensor<T>> {
        let mut v = Vec::new();
        for s in &self.steps {
            v.extend(s.blocks.iter().flatten().map(|u| &u.lif.out));
            v.push(&s.head_lif.out);
        }
        v
    }

    /// Mean firing rate over all recorded spike maps.
    pub fn firing_rate(&self) -> f64 {
        let maps = self.spike_maps();
        let total: usize = maps.iter().map(|m| m.len()).sum();
        let ones: f64 = maps.iter().flat_map(|m| m.data()).map(|v| v.as_f64()).sum();
        if total == 0 {
            0.0
        } else {
            ones / total as f64
        }
    }
}

/// Result of a training-mode forward pass.
pub struct ForwardTrain<T> {
    /// Classifier outputs summed over timesteps, `(N, classes)`.
    pub logits: DenseTensor<T>,
    pub tape: Tape<T>,
    /// Batch statistics per `(unit index, timestep)` to fold into the running averages.
    pub bn_stats: Vec<(usize, BnStats<T>)>,
}

/// Spiking network: dense stem conv, a stack of blocks, and a linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    pub stem: DenseConvLayer<T>,
    pub blocks: Vec<Block<T>>,
    pub head: Linear<T>,
    pub lif: LIFParams,
    pub gate: Gate,
    pub timesteps: usize,
}

impl<T: Real> Network<T> {
    pub fn new(
        stem: DenseConvLayer<T>,
        blocks: Vec<Block<T>>,
        head: Linear<T>,
        lif: LIFParams,
        gate: Gate,
        timesteps: usize,
    ) -> Result<Self> {
        let net = Self { stem, blocks, head, lif, gate, timesteps };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be positive".into()));
        }
        let check_unit = |u: &Unit<T>, c: usize, name: &str| -> Result<usize> {
            if u.bn.channels() != c || u.conv.in_channels() != c {
                return shape_err(format!(
                    "{name}: expects {} channels (bn {}), receives {c}",
                    u.conv.in_channels(),
                    u.bn.channels()
                ));
            }
            if u.bn.running_mean.len() != self.timesteps {
                return Err(Error::Config(format!(
                    "{name}: batchnorm tracks {} timesteps, network runs {}",
                    u.bn.running_mean.len(),
                    self.timesteps
                )));
            }
            Ok(u.conv.out_channels())
        };
        let mut c = self.stem.out_channels();
        for (i, block) in self.blocks.iter().enumerate() {
            c = match block {
                Block::Plain(u) => check_unit(u, c, &format!("block{i}"))?,
                Block::Residual { a, b, shortcut } => {
                    let ca = check_unit(a, c, &format!("block{i}.a"))?;
                    let cb = check_unit(b, ca, &format!("block{i}.b"))?;
                    match shortcut {
                        Some(s) if s.in_channels() != c || s.out_channels() != cb => {
                            return shape_err(format!("block{i}: shortcut {c}->{cb} mismatch"));
                        }
                        None if c != cb || a.conv.stride() != 1 || b.conv.stride() != 1 => {
                            return shape_err(format!("block{i}: identity shortcut needs matching shapes"));
                        }
                        _ => {}
                    }
                    cb
                }
            };
        }
        if self.head.features() != c || self.head.bias.len() != self.head.classes() {
            return shape_err(format!("classifier expects {} features, receives {c}", self.head.features()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.head.classes()
    }

    fn n_lif(&self) -> usize {
        self.blocks.iter().map(|b| b.units().len()).sum::<usize>() + 1
    }

    pub fn units(&self) -> Vec<&Unit<T>> {
        self.blocks.iter().flat_map(|b| b.units()).collect()
    }

    /// Parameters in canonical order; gradients use the same order.
    pub fn params(&self) -> Vec<&DenseTensor<T>> {
        let mut v = vec![&self.stem.weight];
        for b in &self.blocks {
            for u in b.units() {
                v.push(&u.bn.gamma);
                v.push(&u.bn.beta);
                v.extend(u.conv.params());
            }
            if let Block::Residual { shortcut: Some(s), .. } = b {
                v.push(&s.weight);
            }
        }
        v.push(&self.head.weight);
        v.push(&self.head.bias);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseTensor<T>> {
        let mut v = vec![&mut self.stem.weight];
        for b in &mut self.blocks {
            match b {
                Block::Plain(u) => push_unit_mut(&mut v, u),
                Block::Residual { a, b, shortcut } => {
                    push_unit_mut(&mut v, a);
                    push_unit_mut(&mut v, b);
                    if let Some(s) = shortcut {
                        v.push(&mut s.weight);
                    }
                }
            }
        }
        v.push(&mut self.head.weight);
        v.push(&mut self.head.bias);
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = vec!["stem.weight".to_string()];
        for (i, b) in self.blocks.iter().enumerate() {
            let prefixes: Vec<String> = match b {
                Block::Plain(_) => vec![format!("block{i}")],
                Block::Residual { .. } => vec![format!("block{i}.a"), format!("block{i}.b")],
            };
            for (u, p) in b.units().into_iter().zip(prefixes) {
                v.push(format!("{p}.bn.gamma"));
                v.push(format!("{p}.bn.beta"));
                v.extend(u.conv.param_suffixes().iter().map(|s| format!("{p}.conv.{s}")));
            }
            if let Block::Residual { shortcut: Some(_), .. } = b {
                v.push(format!("block{i}.shortcut.weight"));
            }
        }
        v.push("head.weight".into());
        v.push("head.bias".into());
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Running statistics as `(T, C)` tensors, named after their unit.
    pub fn named_buffers(&self) -> Vec<(String, DenseTensor<T>)> {
        let mut out = Vec::new();
        for (i, u) in self.units().into_iter().enumerate() {
            for (kind, rows) in [("running_mean", &u.bn.running_mean), ("running_var", &u.bn.running_var)] {
                let c = u.bn.channels();
                let data: Vec<T> = rows.iter().flatten().copied().collect();
                out.push((format!("unit{i}.bn.{kind}"), DenseTensor::new(vec![rows.len(), c], data).expect("shape")));
            }
        }
        out
    }

    pub fn load_buffers(&mut self, buffers: &[(String, DenseTensor<T>)]) -> Result<()> {
        let timesteps = self.timesteps;
        let mut units: Vec<&mut Unit<T>> = self.blocks.iter_mut().flat_map(|b| b.units_mut()).collect();
        for (name, t) in buffers {
            let parse = || -> Option<(usize, bool)> {
                let rest = name.strip_prefix("unit")?;
                let (idx, kind) = rest.split_once(".bn.")?;
                Some((idx.parse().ok()?, kind == "running_mean"))
            };
            let (idx, is_mean) = parse().ok_or_else(|| Error::Format(format!("unknown buffer {name}")))?;
            let u = units.get_mut(idx).ok_or_else(|| Error::Format(format!("buffer {name} has no unit")))?;
            let c = u.bn.channels();
            if t.shape() != [timesteps, c] {
                return shape_err(format!("buffer {name}: {:?} vs ({timesteps}, {c})", t.shape()));
            }
            let rows: Vec<Vec<T>> = t.data().chunks(c).map(|r| r.to_vec()).collect();
            if is_mean {
                u.bn.running_mean = rows;
            } else {
                u.bn.running_var = rows;
            }
        }
        Ok(())
    }

    pub fn apply_bn_stats(&mut self, stats: &[(usize, BnStats<T>)], batch_count: usize) {
        let mut units: Vec<&mut Unit<T>> = self.blocks.iter_mut().flat_map(|b| b.units_mut()).collect();
        for (idx, s) in stats {
            if let Some(u) = units.get_mut(*idx) {
                u.bn.update_running(s, batch_count);
            }
        }
    }

    /// Copy of the network with every TT op replaced by its merged dense conv.
    pub fn merged(&self) -> Result<Network<T>> {
        let mut net = self.clone();
        for b in &mut net.blocks {
            for u in b.units_mut() {
                u.conv = u.conv.merged()?;
            }
        }
        Ok(net)
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let cast_dense = |l: &DenseConvLayer<T>| DenseConvLayer { weight: l.weight.cast(), geometry: l.geometry };
        let cast_unit = |u: &Unit<T>| Unit {
            bn: BatchNorm {
                gamma: u.bn.gamma.cast(),
                beta: u.bn.beta.cast(),
                running_mean: u
                    .bn
                    .running_mean
                    .iter()
                    .map(|r| r.iter().map(|v| U::lit(v.as_f64())).collect())
                    .collect(),
                running_var: u.bn.running_var.iter().map(|r| r.iter().map(|v| U::lit(v.as_f64())).collect()).collect(),
            },
            conv: match &u.conv {
                ConvOp::Dense(l) => ConvOp::Dense(cast_dense(l)),
                ConvOp::Tt(l) => ConvOp::Tt(TTConvLayer {
                    cores: l.cores.cast(),
                    mode: l.mode,
                    stride: l.stride,
                    schedule: l.schedule.clone(),
                }),
            },
        };
        Network {
            stem: cast_dense(&self.stem),
            blocks: self
                .blocks
                .iter()
                .map(|b| match b {
                    Block::Plain(u) => Block::Plain(cast_unit(u)),
                    Block::Residual { a, b, shortcut } => Block::Residual {
                        a: cast_unit(a),
                        b: cast_unit(b),
                        shortcut: shortcut.as_ref().map(cast_dense),
                    },
                })
                .collect(),
            head: Linear { weight: self.head.weight.cast(), bias: self.head.bias.cast() },
            lif: self.lif,
            gate: self.gate,
            timesteps: self.timesteps,
        }
    }

    fn lif_forward(&self, mem: &mut Option<DenseTensor<T>>, input: &DenseTensor<T>) -> LifRec<T> {
        let tau = T::lit(self.lif.tau_m);
        let mut u_pre = input.clone();
        if let Some(m) = mem.as_ref() {
            u_pre.data_mut().iter_mut().zip(m.data()).for_each(|(u, &v)| *u += tau * v);
        }
        let mut out = DenseTensor::zeros(input.shape());
        let mut next = DenseTensor::zeros(input.shape());
        for ((o, n), &u) in out.data_mut().iter_mut().zip(next.data_mut().iter_mut()).zip(u_pre.data()) {
            let (s, m) = self.gate.fire(u, &self.lif);
            *o = s;
            *n = m;
        }
        *mem = Some(next);
        LifRec { u_pre, out }
    }

    /// `dL/d(input current)` of one LIF step; updates `carry` to the gradient owed by the
    /// previous timestep's stored membrane.
    fn lif_backward(
        &self,
        rec: &LifRec<T>,
        d_out: &DenseTensor<T>,
        carry: &mut Option<DenseTensor<T>>,
    ) -> DenseTensor<T> {
        let tau = T::lit(self.lif.tau_m);
        let mut du = DenseTensor::zeros(d_out.shape());
        let d_mem = carry.as_ref().map(|c| c.data());
        for (i, d) in du.data_mut().iter_mut().enumerate() {
            let dm = d_mem.map_or(T::zero(), |c| c[i]);
            *d = self.gate.backward(rec.u_pre.data()[i], rec.out.data()[i], d_out.data()[i], dm, &self.lif);
        }
        *carry = Some(du.scale(tau));
        du
    }

    fn check_input(&self, x: &DenseTensor<T>) -> Result<()> {
        if x.ndim() != 4 || x.shape()[1] != self.stem.in_channels() {
            return shape_err(format!(
                "network expects (N, {}, H, W) input, got {:?}",
                self.stem.in_channels(),
                x.shape()
            ));
        }
        Ok(())
    }

    /// Inference over all timesteps with running BN statistics; returns timestep-summed logits.
    pub fn forward_eval(&self, x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
        self.check_input(x)?;
        let stem_out = self.stem.forward(x)?;
        let mut mems: Vec<Option<DenseTensor<T>>> = vec![None; self.n_lif()];
        let mut logits = DenseTensor::zeros(&[x.shape()[0], self.num_classes()]);
        for t in 0..self.timesteps {
            let mut cur = stem_out.clone();
            let mut li = 0;
            let mut unit =
                |u: &Unit<T>, li: &mut usize, cur: &DenseTensor<T>| -> Result<(DenseTensor<T>, DenseTensor<T>)> {
                    let s = self.lif_forward(&mut mems[*li], cur).out;
                    *li += 1;
                    let z = u.bn.forward_eval(&s, t)?;
                    Ok((u.conv.forward(&z, t)?, z))
                };
            for b in &self.blocks {
                cur = match b {
                    Block::Plain(u) => unit(u, &mut li, &cur)?.0,
                    Block::Residual { a, b, shortcut } => {
                        let (ya, za) = unit(a, &mut li, &cur)?;
                        let (mut yb, _) = unit(b, &mut li, &ya)?;
                        match shortcut {
                            Some(s) => yb.add_assign(&s.forward(&za)?)?,
                            None => yb.add_assign(&cur)?,
                        }
                        yb
                    }
                };
            }
            let s = self.lif_forward(&mut mems[li], &cur).out;
            logits.add_assign(&self.head.forward(&global_pool(&s)))?;
        }
        Ok(logits)
    }

    /// Training-mode forward pass (batch BN statistics) that records the tape.
    pub fn forward_train(&self, x: &DenseTensor<T>) -> Result<ForwardTrain<T>> {
        forward_unrolled(&[self], x)
    }

    /// Reverse pass; returns gradients in [`Network::params`] order.
    pub fn backward(&self, tape: &Tape<T>, d_logits: &DenseTensor<T>) -> Result<Vec<DenseTensor<T>>> {
        Ok(backprop_unrolled(&[self], tape, d_logits)?.pop().expect("one copy"))
    }

    /// Locates the first non-finite activation of a training-mode forward pass.
    pub fn first_non_finite(&self, x: &DenseTensor<T>) -> Option<String> {
        if !x.is_finite() {
            return Some("input".into());
        }
        let stem_out = self.stem.forward(x).ok()?;
        if !stem_out.is_finite() {
            return Some("stem (all timesteps)".into());
        }
        let mut mems: Vec<Option<DenseTensor<T>>> = vec![None; self.n_lif()];
        for t in 0..self.timesteps {
            let mut cur = stem_out.clone();
            let mut li = 0;
            for (i, b) in self.blocks.iter().enumerate() {
                let mut zs = Vec::new();
                let mut h = cur.clone();
                for u in b.units() {
                    let s = self.lif_forward(&mut mems[li], &h).out;
                    li += 1;
                    let z = u.bn.forward_train(&s, t).ok()?.0;
                    h = u.conv.forward(&z, t).ok()?;
                    if !z.is_finite() || !h.is_finite() {
                        return Some(format!("block{i} at timestep {t}"));
                    }
                    zs.push(z);
                }
                if let Block::Residual { shortcut, .. } = b {
                    match shortcut {
                        Some(s) => h.add_assign(&s.forward(&zs[0]).ok()?).ok()?,
                        None => h.add_assign(&cur).ok()?,
                    }
                }
                cur = h;
            }
            let s = self.lif_forward(&mut mems[li], &cur).out;
            if !self.head.forward(&global_pool(&s)).is_finite() {
                return Some(format!("classifier at timestep {t}"));
            }
        }
        None
    }
}

fn push_unit_mut<'a, T: Real>(v: &mut Vec<&'a mut DenseTensor<T>>, u: &'a mut Unit<T>) {
    v.push(&mut u.bn.gamma);
    v.push(&mut u.bn.beta);
    v.extend(u.conv.params_mut());
}

fn global_pool<T: Real>(s: &DenseTensor<T>) -> DenseTensor<T> {
    let (n, c) = (s.shape()[0], s.shape()[1]);
    let hw = s.len() / (n * c).max(1);
    let inv = T::one() / T::lit(hw as f64);
    let data = s.data().chunks(hw).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
    DenseTensor::new(vec![n, c], data).expect("shape")
}

fn copy_index(copies: usize, t: usize) -> usize {
    if copies == 1 {
        0
    } else {
        t
    }
}

fn check_copies<T: Real>(nets: &[&Network<T>]) -> Result<()> {
    let first = nets.first().ok_or_else(|| Error::Contract("no network given".into()))?;
    if nets.len() != 1 && nets.len() != first.timesteps {
        return Err(Error::Contract(format!(
            "unrolled forward needs 1 or T = {} parameter copies, got {}",
            first.timesteps,
            nets.len()
        )));
    }
    let shapes = |n: &Network<T>| n.params().iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>();
    let reference = shapes(first);
    if nets.iter().any(|n| shapes(n) != reference || n.timesteps != first.timesteps) {
        return Err(Error::Contract("unrolled copies differ in structure".into()));
    }
    Ok(())
}

/// Training-mode forward where timestep `t` uses `nets[t]` (or `nets[0]` for every `t` when a
/// single copy is given). With one copy this is the ordinary weight-shared network; with `T`
/// structurally identical copies it is the time-unrolled network whose per-copy gradients sum
/// to the shared gradient.
pub fn forward_unrolled<T: Real>(nets: &[&Network<T>], x: &DenseTensor<T>) -> Result<ForwardTrain<T>> {
    check_copies(nets)?;
    let net0 = nets[0];
    net0.check_input(x)?;
    let timesteps = net0.timesteps;
    let stem_out: Vec<DenseTensor<T>> = nets.iter().map(|n| n.stem.forward(x)).collect::<Result<_>>()?;
    let mut mems: Vec<Option<DenseTensor<T>>> = vec![None; net0.n_lif()];
    let mut logits = DenseTensor::zeros(&[x.shape()[0], net0.num_classes()]);
    let mut steps = Vec::with_capacity(timesteps);
    let mut bn_stats = Vec::new();
    for t in 0..timesteps {
        let net = nets[copy_index(nets.len(), t)];
        let mut cur = stem_out[copy_index(nets.len(), t)].clone();
        let mut li = 0;
        let mut ui = 0;
        let mut block_recs = Vec::with_capacity(net.blocks.len());
        for b in &net.blocks {
            let mut recs = Vec::new();
            let mut h = cur.clone();
            for u in b.units() {
                let lif = net.lif_forward(&mut mems[li], &h);
                li += 1;
                let (z, bn_cache, stats) = u.bn.forward_train(&lif.out, t)?;
                bn_stats.push((ui, stats));
                ui += 1;
                let (y, cache) = u.conv.forward_cached(&z, t)?;
                recs.push(UnitRec { lif, bn: bn_cache, bn_out: z, conv: cache });
                h = y;
            }
            if let Block::Residual { shortcut, .. } = b {
                match shortcut {
                    Some(s) => h.add_assign(&s.forward(&recs[0].bn_out)?)?,
                    None => h.add_assign(&cur)?,
                }
            }
            block_recs.push(recs);
            cur = h;
        }
        let head_lif = net.lif_forward(&mut mems[li], &cur);
        let pooled = global_pool(&head_lif.out);
        logits.add_assign(&net.head.forward(&pooled))?;
        steps.push(StepRec { blocks: block_recs, head_lif, pooled });
    }
    let tape = Tape { input: x.clone(), copies: nets.len(), stem_out, steps };
    Ok(ForwardTrain { logits, tape, bn_stats })
}

/// Backpropagation through time over a recorded tape.
///
/// Traverses timesteps in reverse and, within each timestep, layers in reverse; the Heaviside
/// derivative is replaced by the gate's backward rule. Returns one gradient list per parameter
/// copy, each in [`Network::params`] order; with a single copy the contributions of all
/// timesteps accumulate into the shared weights.
pub fn backprop_unrolled<T: Real>(
    nets: &[&Network<T>],
    tape: &Tape<T>,
    d_logits: &DenseTensor<T>,
) -> Result<Vec<Vec<DenseTensor<T>>>> {
    check_copies(nets)?;
    let net0 = nets[0];
    if tape.copies != nets.len() || tape.steps.len() != net0.timesteps {
        return Err(Error::Contract(format!(
            "tape records {} timesteps over {} copies; expected {} over {}",
            tape.steps.len(),
            tape.copies,
            net0.timesteps,
            nets.len()
        )));
    }
    let n = tape.input.shape()[0];
    if d_logits.shape() != [n, net0.num_classes()] {
        return shape_err(format!("logit gradient {:?} vs ({n}, {})", d_logits.shape(), net0.num_classes()));
    }
    let mut grads: Vec<Vec<DenseTensor<T>>> =
        nets.iter().map(|net| net.params().iter().map(|p| DenseTensor::zeros(p.shape())).collect()).collect();
    let mut d_stem: Vec<DenseTensor<T>> = tape.stem_out.iter().map(|s| DenseTensor::zeros(s.shape())).collect();
    let mut carries: Vec<Option<DenseTensor<T>>> = vec![None; net0.n_lif()];

    let k = net0.num_classes();
    for t in (0..tape.steps.len()).rev() {
        let ci = copy_index(nets.len(), t);
        let net = nets[ci];
        let g = &mut grads[ci];
        let rec = &tape.steps[t];
        let head_off = g.len() - 2;

        let c = net.head.features();
        matmul_at(k, n, c, d_logits.data(), rec.pooled.data(), g[head_off].data_mut(), true);
        for row in d_logits.data().chunks(k) {
            g[head_off + 1].data_mut().iter_mut().zip(row).for_each(|(a, &b)| *a += b);
        }
        let mut d_pooled = vec![T::zero(); n * c];
        matmul(n, k, c, d_logits.data(), net.head.weight.data(), &mut d_pooled, false);
        let shape = rec.head_lif.out.shape();
        let hw = shape[2] * shape[3];
        let inv = T::one() / T::lit(hw as f64);
        let d_spikes = DenseTensor::from_fn(shape, |ix| d_pooled[ix[0] * c + ix[1]] * inv);
        let mut li = carries.len() - 1;
        let mut d_cur = net.lif_backward(&rec.head_lif, &d_spikes, &mut carries[li]);

        let mut offsets = Vec::with_capacity(net.blocks.len());
        let mut off = 1;
        for b in &net.blocks {
            offsets.push(off);
            off += b.units().iter().map(|u| 2 + u.conv.params().len()).sum::<usize>();
            if let Block::Residual { shortcut: Some(_), .. } = b {
                off += 1;
            }
        }

        for (bi, b) in net.blocks.iter().enumerate().rev() {
            let recs = &rec.blocks[bi];
            let off = offsets[bi];
            d_cur = match b {
                Block::Plain(u) => {
                    li -= 1;
                    unit_backward(net, u, &recs[0], &d_cur, None, &mut carries[li], &mut g[off..])?
                }
                Block::Residual { a, b: ub, shortcut } => {
                    let na = 2 + a.conv.params().len();
                    let nb = 2 + ub.conv.params().len();
                    li -= 1;
                    let d_ya = unit_backward(net, ub, &recs[1], &d_cur, None, &mut carries[li], &mut g[off + na..])?;
                    let extra = match shortcut {
                        Some(s) => {
                            let (dz, dw) = s.backward(&recs[0].bn_out, &d_cur, true)?;
                            g[off + na + nb].add_assign(&dw)?;
                            dz
                        }
                        None => None,
                    };
                    li -= 1;
                    let mut d_in =
                        unit_backward(net, a, &recs[0], &d_ya, extra.as_ref(), &mut carries[li], &mut g[off..])?;
                    if shortcut.is_none() {
                        d_in.add_assign(&d_cur)?;
                    }
                    d_in
                }
            };
        }
        d_stem[ci].add_assign(&d_cur)?;
    }
    for (ci, net) in nets.iter().enumerate() {
        let (_, dw) = net.stem.backward(&tape.input, &d_stem[ci], false)?;
        grads[ci][0].add_assign(&dw)?;
    }
    Ok(grads)
}

fn unit_backward<T: Real>(
    net: &Network<T>,
    u: &Unit<T>,
    rec: &UnitRec<T>,
    dy: &DenseTensor<T>,
    extra_dz: Option<&DenseTensor<T>>,
    carry: &mut Option<DenseTensor<T>>,
    g: &mut [DenseTensor<T>],
) -> Result<DenseTensor<T>> {
    let (mut dz, conv_grads) = u.conv.backward(&rec.bn_out, &rec.conv, dy)?;
    if let Some(e) = extra_dz {
        dz.add_assign(e)?;
    }
    let (ds, dgamma, dbeta) = u.bn.backward(&rec.bn, &dz)?;
    g[0].add_assign(&dgamma)?;
    g[1].add_assign(&dbeta)?;
    for (dst, src) in g[2..].iter_mut().zip(&conv_grads) {
        dst.add_assign(src)?;
    }
    Ok(net.lif_backward(&rec.lif, &ds, carry))
}

/// Mean cross-entropy of timestep-summed logits; returns `(loss, dL/dlogits)`.
pub fn cross_entropy<T: Real>(logits: &DenseTensor<T>, labels: &[usize]) -> Result<(f64, DenseTensor<T>)> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() || labels.is_empty() {
        return shape_err(format!("logits {:?} vs {} labels", logits.shape(), labels.len()));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut grad = DenseTensor::zeros(&[n, k]);
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.data().chunks(k).zip(labels).enumerate() {
        if y >= k {
            return Err(Error::Input(format!("label {y} out of range for {k} classes")));
        }
        let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
        let z: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
        loss += z.ln() + m - row[y].as_f64();
        for (j, v) in row.iter().enumerate() {
            let p = (v.as_f64() - m).exp() / z;
            let target = if j == y { 1.0 } else { 0.0 };
            grad.data_mut()[i * k + j] = T::lit((p - target) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

pub fn argmax_rows<T: Real>(logits: &DenseTensor<T>) -> Vec<usize> {
    let k = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}
