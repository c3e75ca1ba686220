use super::{LayerParams, ModelParams, VitError};
use crate::diffcore::{Graph, Real, Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// Graph leaves for one layer storage.
#[derive(Clone, Debug)]
pub struct BoundLayer {
    vars: Vec<Var>,
}

impl BoundLayer {
    fn get(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// A model's parameters recorded as leaves of one graph. Each storage is
/// bound once, so every position aliasing it feeds the same leaf and its
/// gradient is the sum over those positions.
#[derive(Clone, Debug)]
pub struct BoundModel {
    shared: Vec<Var>,
    layers: Vec<BoundLayer>,
    layer_map: Vec<usize>,
}

impl<T: Real> ModelParams<T> {
    /// Records every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundModel {
        self.bind_with(g, true)
    }

    /// Records every tensor as a constant (evaluation, frozen teachers).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BoundModel {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        let mut leaf = |t: &Tensor<T>| if trainable { g.param(t) } else { g.constant(t) };
        let shared = self.shared.tensors().into_iter().map(|(_, t)| leaf(t)).collect();
        let layers = self
            .layers()
            .iter()
            .map(|l| BoundLayer {
                vars: l.tensors().into_iter().map(|(_, t)| leaf(t)).collect(),
            })
            .collect();
        BoundModel {
            shared,
            layers,
            layer_map: self.layer_map().to_vec(),
        }
    }

    /// Adds the graph's leaf gradients into each tensor's accumulator.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, bound: &BoundModel) -> Result<(), VitError> {
        let mut vars = bound.shared.iter().chain(bound.layers.iter().flat_map(|l| &l.vars));
        for (_, t) in self.named_tensors_mut() {
            let v = *vars.next().expect("bound model matches parameter layout");
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// Pre-LN forward pass producing `[B, classes]` logits.
    pub fn forward(&self, g: &mut Graph<T>, bound: &BoundModel, images: Var) -> Result<Var, VitError> {
        let cfg = self.config();
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
            return Err(VitError::Diff(crate::diffcore::DiffError::Shape {
                op: "forward_logits",
                lhs: s,
                rhs: vec![0, cfg.channels, cfg.image_size, cfg.image_size],
            }));
        }
        let b = s[0];
        let (n, d, t) = (cfg.num_patches(), cfg.width, cfg.tokens());
        let sh = &bound.shared;

        let x = g.patchify(images, cfg.patch_size)?;
        let x = g.reshape(x, [b * n, cfg.patch_dim()])?;
        let x = g.matmul(x, sh[0])?;
        let x = g.add_broadcast(x, sh[1])?;
        let x = g.reshape(x, [b, n, d])?;
        let x = g.prepend_token(x, sh[2])?;
        let mut x = g.add_broadcast(x, sh[3])?;

        for &storage in &bound.layer_map {
            x = block(g, x, &bound.layers[storage], b, t, cfg.heads, d)?;
        }

        let cls = g.narrow(x, 1, 0, 1)?;
        let cls = g.reshape(cls, [b, d])?;
        let cls = g.layer_norm(cls, sh[4], sh[5], LN_EPS)?;
        let logits = g.matmul(cls, sh[6])?;
        Ok(g.add_broadcast(logits, sh[7])?)
    }
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, bias: Var) -> Result<Var, VitError> {
    let y = g.matmul(x, w)?;
    Ok(g.add_broadcast(y, bias)?)
}

/// One pre-LN layer: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
fn block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    p: &BoundLayer,
    b: usize,
    t: usize,
    heads: usize,
    d: usize,
) -> Result<Var, VitError> {
    let dh = d / heads;
    // Field order follows LayerParams::NAMES.
    let idx = |name: &str| {
        LayerParams::<T>::NAMES
            .iter()
            .position(|&n| n == name)
            .expect("known layer tensor")
    };
    let v = |name: &str| p.get(idx(name));

    let h = g.layer_norm(x, v("norm1.weight"), v("norm1.bias"), LN_EPS)?;
    let h = g.reshape(h, [b * t, d])?;
    let qkv = linear(g, h, v("attn.qkv.weight"), v("attn.qkv.bias"))?;
    let qkv = g.reshape(qkv, [b, t, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = g.reshape(qkv, [3, b * heads, t, dh])?;
    let mut split = |i: usize| -> Result<Var, VitError> {
        let s = g.narrow(qkv, 0, i, 1)?;
        Ok(g.reshape(s, [b * heads, t, dh])?)
    };
    let (q, k, val) = (split(0)?, split(1)?, split(2)?);
    let q = g.scale(q, T::of(1.0 / (dh as f64).sqrt()));
    let scores = g.bmm(q, k, true)?;
    let attn = g.softmax(scores)?;
    let ctx = g.bmm(attn, val, false)?;
    let ctx = g.reshape(ctx, [b, heads, t, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, [b * t, d])?;
    let out = linear(g, ctx, v("attn.proj.weight"), v("attn.proj.bias"))?;
    let out = g.reshape(out, [b, t, d])?;
    let x = g.add(x, out)?;

    let h = g.layer_norm(x, v("norm2.weight"), v("norm2.bias"), LN_EPS)?;
    let h = g.reshape(h, [b * t, d])?;
    let h = linear(g, h, v("mlp.fc1.weight"), v("mlp.fc1.bias"))?;
    let h = g.gelu(h);
    let h = linear(g, h, v("mlp.fc2.weight"), v("mlp.fc2.bias"))?;
    let h = g.reshape(h, [b, t, d])?;
    Ok(g.add(x, h)?)
}

/// Logits for a batch without recording gradients.
pub fn forward_logits<T: Real>(params: &ModelParams<T>, images: &Tensor<T>) -> Result<Tensor<T>, VitError> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let x = g.constant(images);
    let logits = params.forward(&mut g, &bound, x)?;
    Ok(g.tensor(logits))
}
