//! Small encoder–decoder with skip connections.
//!
//! Each level is a block of two 3×3 convolutions with SiLU; the first
//! convolution of every block receives an optional per-channel bias projected
//! from an embedding vector (timestep, frame distance). Downsampling is 2×2
//! average pooling and upsampling is nearest-neighbour.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    add_channel_bias, avg_pool2, avg_pool2_backward, channel_sums, concat_channels, conv2d,
    conv2d_backward, linear, linear_backward, silu, silu_backward, silu_grad, silu_tensor,
    split_channels, upsample2, upsample2_backward, Real, Tensor,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Number of 2× downsampling levels.
    pub depth: usize,
    /// Length of the conditioning feature vector; 0 disables the embedding path.
    pub embed_features: usize,
    pub embed_hidden: usize,
}

impl UNetSpec {
    fn level_width(&self, level: usize) -> usize {
        if level == 0 {
            self.base_width
        } else {
            2 * self.base_width
        }
    }

    /// Spatial sizes must survive `depth` halvings.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::InvalidParameter(format!(
                "image {h}x{w} not divisible by {f} (depth {})",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ManifestEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Deterministic layout of the flat parameter blob.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.total();
        self.entries.push(ManifestEntry { name, shape, offset });
        offset
    }

    pub fn total(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len())
    }

    /// Splits a blob into named tensors.
    pub fn split<'a, T>(&self, blob: &'a [T]) -> Result<Vec<(&str, &'a [T])>> {
        if blob.len() != self.total() {
            return Err(Error::SizeMismatch(format!(
                "blob has {} values, manifest expects {}",
                blob.len(),
                self.total()
            )));
        }
        Ok(self
            .entries
            .iter()
            .map(|e| (e.name.as_str(), &blob[e.offset..e.offset + e.len()]))
            .collect())
    }

    /// Inverse of [`Manifest::split`]; tensors must arrive in manifest order.
    pub fn join<T: Copy>(&self, parts: &[(&str, &[T])]) -> Result<Vec<T>> {
        if parts.len() != self.entries.len() {
            return Err(Error::SizeMismatch(format!(
                "{} tensors for {} manifest entries",
                parts.len(),
                self.entries.len()
            )));
        }
        let mut blob = Vec::with_capacity(self.total());
        for (e, (name, data)) in self.entries.iter().zip(parts) {
            if e.name != *name || e.len() != data.len() {
                return Err(Error::SizeMismatch(format!("tensor {name} does not match entry {}", e.name)));
            }
            blob.extend_from_slice(data);
        }
        Ok(blob)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct LinRef {
    w: usize,
    b: usize,
    din: usize,
    dout: usize,
}

#[derive(Debug, Clone)]
struct Block {
    a: ConvRef,
    b: ConvRef,
    emb: Option<LinRef>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    spec: UNetSpec,
    manifest: Manifest,
    embed: Option<LinRef>,
    /// Forward order: encoder levels, bottleneck, decoder levels (deepest first).
    blocks: Vec<Block>,
    head: ConvRef,
}

struct BlockTrace<T> {
    input: Tensor<T>,
    a1: Tensor<T>,
    h1: Tensor<T>,
    a2: Tensor<T>,
}

/// Activations retained by a forward pass for the backward pass.
pub struct Trace<T> {
    n: usize,
    emb_in: Vec<T>,
    emb_pre: Vec<T>,
    emb_h: Vec<T>,
    blocks: Vec<BlockTrace<T>>,
    head_in: Tensor<T>,
}

fn conv_ref(m: &mut Manifest, name: &str, cin: usize, cout: usize, k: usize) -> ConvRef {
    let w = m.push(format!("{name}.weight"), vec![cout, cin, k, k]);
    let b = m.push(format!("{name}.bias"), vec![cout]);
    ConvRef { w, b, cin, cout, k }
}

fn lin_ref(m: &mut Manifest, name: &str, din: usize, dout: usize) -> LinRef {
    let w = m.push(format!("{name}.weight"), vec![dout, din]);
    let b = m.push(format!("{name}.bias"), vec![dout]);
    LinRef { w, b, din, dout }
}

impl ConvRef {
    fn weight<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.w..self.b]
    }

    fn bias<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.b..self.b + self.cout]
    }

    fn grads<'a, T>(&self, g: &'a mut [T]) -> (&'a mut [T], &'a mut [T]) {
        if g.is_empty() {
            return g.split_at_mut(0);
        }
        g[self.w..self.b + self.cout].split_at_mut(self.b - self.w)
    }

    fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(x.c, self.cin);
        conv2d(x, self.weight(p), self.bias(p), self.cout, self.k)
    }

    fn backward<T: Real>(&self, p: &[T], g: &mut [T], x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let (gw, gb) = self.grads(g);
        conv2d_backward(x, self.weight(p), dy, gw, gb, self.k, need_dx)
    }
}

impl LinRef {
    fn forward<T: Real>(&self, p: &[T], x: &[T], n: usize) -> Vec<T> {
        linear(x, n, &p[self.w..self.b], &p[self.b..self.b + self.dout], self.dout)
    }

    fn backward<T: Real>(&self, p: &[T], g: &mut [T], x: &[T], n: usize, dy: &[T], need_dx: bool) -> Option<Vec<T>> {
        let (gw, gb) = if g.is_empty() {
            g.split_at_mut(0)
        } else {
            g[self.w..self.b + self.dout].split_at_mut(self.b - self.w)
        };
        linear_backward(x, n, &p[self.w..self.b], dy, gw, gb, self.dout, need_dx)
    }
}

impl UNet {
    pub fn new(spec: UNetSpec) -> Result<Self> {
        if spec.in_channels == 0 || spec.out_channels == 0 || spec.base_width == 0 || spec.depth == 0 {
            return Err(Error::InvalidParameter(format!("degenerate network spec {spec:?}")));
        }
        if spec.embed_features > 0 && spec.embed_hidden == 0 {
            return Err(Error::InvalidParameter("embedding needs a hidden width".into()));
        }
        let mut m = Manifest::default();
        let embed = (spec.embed_features > 0)
            .then(|| lin_ref(&mut m, "embed.hidden", spec.embed_features, spec.embed_hidden));
        let mut blocks = Vec::with_capacity(2 * spec.depth + 1);
        let block = |m: &mut Manifest, name: &str, cin: usize, cout: usize| Block {
            a: conv_ref(m, &format!("{name}.conv_a"), cin, cout, 3),
            b: conv_ref(m, &format!("{name}.conv_b"), cout, cout, 3),
            emb: embed.map(|_| lin_ref(m, &format!("{name}.embed"), spec.embed_hidden, cout)),
        };
        let mut cin = spec.in_channels;
        for l in 0..spec.depth {
            let b = block(&mut m, &format!("enc{l}"), cin, spec.level_width(l));
            cin = spec.level_width(l);
            blocks.push(b);
        }
        let mid_w = spec.level_width(spec.depth);
        blocks.push(block(&mut m, "mid", cin, mid_w));
        let mut below = mid_w;
        for l in (0..spec.depth).rev() {
            let w = spec.level_width(l);
            blocks.push(block(&mut m, &format!("dec{l}"), below + w, w));
            below = w;
        }
        let head = conv_ref(&mut m, "head", spec.base_width, spec.out_channels, 1);
        Ok(Self {
            spec,
            manifest: m,
            embed,
            blocks,
            head,
        })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn param_count(&self) -> usize {
        self.manifest.total()
    }

    /// Seeded uniform fan-in initialisation; biases start at zero and the
    /// output head is scaled down so initial predictions are small.
    pub fn init_params(&self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0.0f32; self.param_count()];
        let mut fill = |p: &mut [f32], range: std::ops::Range<usize>, fan_in: usize, gain: f32| {
            let bound = gain * (6.0 / fan_in as f32).sqrt();
            for v in &mut p[range] {
                *v = rng.gen_range(-bound..bound);
            }
        };
        if let Some(e) = self.embed {
            fill(&mut p, e.w..e.b, e.din, 1.0);
        }
        for blk in &self.blocks {
            fill(&mut p, blk.a.w..blk.a.b, blk.a.cin * 9, 1.0);
            if let Some(e) = blk.emb {
                fill(&mut p, e.w..e.b, e.din, 0.5);
            }
            fill(&mut p, blk.b.w..blk.b.b, blk.b.cin * 9, 1.0);
        }
        fill(&mut p, self.head.w..self.head.b, self.head.cin, 0.1);
        p
    }

    fn block_forward<T: Real>(&self, p: &[T], blk: &Block, x: Tensor<T>, emb_h: &[T], n: usize) -> (Tensor<T>, BlockTrace<T>) {
        let mut a1 = blk.a.forward(p, &x);
        if let Some(e) = blk.emb {
            add_channel_bias(&mut a1, &e.forward(p, emb_h, n));
        }
        let h1 = silu_tensor(&a1);
        let a2 = blk.b.forward(p, &h1);
        let out = silu_tensor(&a2);
        (out, BlockTrace { input: x, a1, h1, a2 })
    }

    /// Returns `(dL/dinput, dL/d(embedding hidden))`.
    fn block_backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        blk: &Block,
        tr: &BlockTrace<T>,
        dout: &Tensor<T>,
        emb_h: &[T],
        n: usize,
        need_dx: bool,
    ) -> (Option<Tensor<T>>, Option<Vec<T>>) {
        let da2 = silu_backward(&tr.a2, dout);
        let dh1 = blk.b.backward(p, g, &tr.h1, &da2, true).expect("dx requested");
        let da1 = silu_backward(&tr.a1, &dh1);
        let demb = blk.emb.and_then(|e| e.backward(p, g, emb_h, n, &channel_sums(&da1), true));
        let dx = blk.a.backward(p, g, &tr.input, &da1, need_dx);
        (dx, demb)
    }

    /// Forward pass. `features` is the `[n, embed_features]` conditioning matrix.
    pub fn forward<T: Real>(&self, p: &[T], x: Tensor<T>, features: Option<&[T]>) -> (Tensor<T>, Trace<T>) {
        assert_eq!(p.len(), self.param_count(), "parameter blob length");
        assert_eq!(x.c, self.spec.in_channels, "input channels");
        let n = x.n;
        let (emb_in, emb_pre, emb_h) = match self.embed {
            Some(e) => {
                let f = features.expect("network expects conditioning features");
                assert_eq!(f.len(), n * e.din);
                let pre = e.forward(p, f, n);
                let h = pre.iter().map(|&v| silu(v)).collect();
                (f.to_vec(), pre, h)
            }
            None => (Vec::new(), Vec::new(), Vec::new()),
        };
        let depth = self.spec.depth;
        let mut traces = Vec::with_capacity(self.blocks.len());
        let mut skips = Vec::with_capacity(depth);
        let mut h = x;
        for blk in &self.blocks[..depth] {
            let (out, tr) = self.block_forward(p, blk, h, &emb_h, n);
            traces.push(tr);
            h = avg_pool2(&out);
            skips.push(out);
        }
        let (out, tr) = self.block_forward(p, &self.blocks[depth], h, &emb_h, n);
        traces.push(tr);
        h = out;
        for (i, blk) in self.blocks[depth + 1..].iter().enumerate() {
            let level = depth - 1 - i;
            let joined = concat_channels(&upsample2(&h), &skips[level]);
            let (out, tr) = self.block_forward(p, blk, joined, &emb_h, n);
            traces.push(tr);
            h = out;
        }
        let y = self.head.forward(p, &h);
        let trace = Trace {
            n,
            emb_in,
            emb_pre,
            emb_h,
            blocks: traces,
            head_in: h,
        };
        (y, trace)
    }

    /// Backward pass; accumulates into `grads` and returns `dL/dx` when asked.
    /// An empty `grads` skips the parameter gradients.
    pub fn backward<T: Real>(&self, p: &[T], trace: &Trace<T>, dy: &Tensor<T>, grads: &mut [T], need_dx: bool) -> Option<Tensor<T>> {
        assert!(grads.is_empty() || grads.len() == self.param_count());
        let n = trace.n;
        let depth = self.spec.depth;
        let mut demb = vec![T::zero(); trace.emb_h.len()];
        let mut add_emb = |d: Option<Vec<T>>| {
            if let Some(d) = d {
                for (a, b) in demb.iter_mut().zip(d) {
                    *a += b;
                }
            }
        };
        let mut dh = self.head.backward(p, grads, &trace.head_in, dy, true).expect("dx requested");
        let mut dskips: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
        for i in (0..depth).rev() {
            let bi = depth + 1 + i;
            let level = depth - 1 - i;
            let (dc, de) = self.block_backward(p, grads, &self.blocks[bi], &trace.blocks[bi], &dh, &trace.emb_h, n, true);
            add_emb(de);
            let up_c = dc.as_ref().unwrap().c - self.spec.level_width(level);
            let (du, ds) = split_channels(&dc.unwrap(), up_c);
            dskips[level] = Some(ds);
            dh = upsample2_backward(&du);
        }
        let (d, de) = self.block_backward(p, grads, &self.blocks[depth], &trace.blocks[depth], &dh, &trace.emb_h, n, true);
        add_emb(de);
        dh = d.unwrap();
        let mut dx = None;
        for level in (0..depth).rev() {
            let mut ds = avg_pool2_backward(&dh);
            for (a, b) in ds.data.iter_mut().zip(&dskips[level].take().unwrap().data) {
                *a += *b;
            }
            let want = level > 0 || need_dx;
            let (d, de) = self.block_backward(p, grads, &self.blocks[level], &trace.blocks[level], &ds, &trace.emb_h, n, want);
            add_emb(de);
            if level > 0 {
                dh = d.unwrap();
            } else {
                dx = d;
            }
        }
        if let (Some(e), false) = (self.embed, grads.is_empty()) {
            let dpre: Vec<T> = demb
                .iter()
                .zip(&trace.emb_pre)
                .map(|(&d, &pre)| d * silu_grad(pre))
                .collect();
            e.backward(p, grads, &trace.emb_in, n, &dpre, false);
        }
        dx
    }
}
