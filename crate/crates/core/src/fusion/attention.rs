use super::{concat_fuse, stacked_channels, FusionConfig};
use crate::blocks::{Ctx, Init, ModelConfig};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::tensor::{Tape, Tensor, Var};

/// Token indices sorted by the bit patterns of their key and value rows.
/// Summing over tokens in this order makes the result depend only on the
/// multiset of tokens, not their positions; equal rows contribute equal
/// terms, so ties need no breaking.
pub fn canonical_token_order(k: &[f64], v: &[f64], t: usize, l: usize) -> Vec<usize> {
    let key = |j: usize| k[j * l..][..l].iter().chain(&v[j * l..][..l]).map(|x| x.to_bits());
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| key(a).cmp(key(b)));
    order
}

/// Multi-head scaled dot-product attention over tokens `[T, L]`.
///
/// Reductions over the token axis run in [`canonical_token_order`], so
/// permuting the tokens permutes the output rows bit-for-bit. Returns the output
/// `[T, L]` and the attention weights `[heads, T, T]`.
pub fn attention_core(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Tensor)> {
    let shape = tape.shape(q).to_vec();
    let (t, l) = match shape[..] {
        [t, l] if heads > 0 && l % heads == 0 => (t, l),
        _ => return Err(Error::shape("attention", format!("tokens {shape:?} with {heads} heads"))),
    };
    if tape.shape(k) != shape || tape.shape(v) != shape {
        return Err(Error::shape("attention", "q, k and v must share one shape"));
    }
    let d = l / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd, vd) = (tape.value(q).data(), tape.value(k).data(), tape.value(v).data());
    let order = canonical_token_order(kd, vd, t, l);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = par::map_indexed(Exec::default(), heads * t, |r| {
        let (h, i) = (r / t, r % t);
        let qi = &qd[i * l + h * d..][..d];
        let scores: Vec<f64> = (0..t)
            .map(|j| scale * qi.iter().zip(&kd[j * l + h * d..][..d]).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = order.iter().map(|&j| e[j]).sum();
        let p: Vec<f64> = e.iter().map(|x| x / z).collect();
        let mut out = vec![0.0; d];
        for &j in &order {
            for (o, x) in out.iter_mut().zip(&vd[j * l + h * d..][..d]) {
                *o += p[j] * x;
            }
        }
        (p, out)
    });
    let mut weights = vec![0.0; heads * t * t];
    let mut out = vec![0.0; t * l];
    for (r, (p, o)) in rows.iter().enumerate() {
        let (h, i) = (r / t, r % t);
        weights[r * t..][..t].copy_from_slice(p);
        out[i * l + h * d..][..d].copy_from_slice(o);
    }
    let weights = Tensor::from_parts(vec![heads, t, t], weights);
    let saved = weights.clone();
    let y = tape.push(Tensor::from_parts(vec![t, l], out), &[q, k, v], move |g, inp, _| {
        let (qd, kd, vd, gd, pd) = (inp[0].data(), inp[1].data(), inp[2].data(), g.data(), saved.data());
        let mut dq = vec![0.0; t * l];
        let mut dk = vec![0.0; t * l];
        let mut dv = vec![0.0; t * l];
        let mut ds = vec![0.0; t];
        for h in 0..heads {
            let col = |x: &[f64], j: usize, c: usize| x[j * l + h * d + c];
            for i in 0..t {
                let p = &pd[(h * t + i) * t..][..t];
                let mut dot = 0.0;
                for j in 0..t {
                    let dp: f64 = (0..d).map(|c| col(gd, i, c) * col(vd, j, c)).sum();
                    ds[j] = dp;
                    dot += p[j] * dp;
                }
                for j in 0..t {
                    let s = p[j] * (ds[j] - dot) * scale;
                    for c in 0..d {
                        dv[j * l + h * d + c] += p[j] * col(gd, i, c);
                        dq[i * l + h * d + c] += s * col(kd, j, c);
                        dk[j * l + h * d + c] += s * col(qd, i, c);
                    }
                }
            }
        }
        vec![
            Some(Tensor::from_parts(vec![t, l], dq)),
            Some(Tensor::from_parts(vec![t, l], dk)),
            Some(Tensor::from_parts(vec![t, l], dv)),
        ]
    });
    Ok((y, weights))
}

/// Transposed (channel) attention on `[L, T]` maps: queries and keys are
/// L2-normalized over positions, each head forms a `d x d` channel
/// affinity scaled by its temperature and softmaxed over channels.
/// Returns `[L, T]` and the attention weights var `[heads, d, d]`.
pub fn channel_attention(tape: &mut Tape, q: Var, k: Var, v: Var, temperature: Var, heads: usize) -> Result<(Var, Var)> {
    let (l, t) = match *tape.shape(q) {
        [l, t] if heads > 0 && l % heads == 0 => (l, t),
        ref s => return Err(Error::shape("channel_attention", format!("maps {s:?} with {heads} heads"))),
    };
    let d = l / heads;
    let split = |tape: &mut Tape, x: Var| tape.reshape(x, &[heads, d, t]);
    let (qh, kh, vh) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
    let qn = tape.l2_normalize(qh, 2, 1e-12)?;
    let kn = tape.l2_normalize(kh, 2, 1e-12)?;
    let kt = tape.permute(kn, &[0, 2, 1])?;
    let scores = tape.matmul(qn, kt)?;
    let scores = tape.mul_along(scores, temperature, 0)?;
    let attn = tape.softmax(scores, 2)?;
    let out = tape.matmul(attn, vh)?;
    Ok((tape.reshape(out, &[l, t])?, attn))
}

/// Strided patch embedding of the stacked inputs: `[1, L, H/s, W/s]`.
fn patch_embed(ctx: &mut Ctx, key: &str, fcfg: &FusionConfig, cam: Var, lidar: Var) -> Result<Var> {
    let cin = stacked_channels(ctx, cam, lidar)?;
    let x = ctx.tape.concat(&[cam, lidar], 1)?;
    ctx.conv(key, x, cin, fcfg.embed, fcfg.patch, fcfg.stride, fcfg.patch / 2, true)
}

/// `[1, L, h, w]` back to `[1, C_fused, h*s, w*s]`.
fn restore(ctx: &mut Ctx, key: &str, mcfg: &ModelConfig, fcfg: &FusionConfig, x: Var) -> Result<Var> {
    ctx.deconv(key, x, fcfg.embed, mcfg.fused_channels, fcfg.stride, fcfg.stride, true)
}

/// Patch tokens, multi-head self-attention with a residual, and a
/// transposed-conv restore to the latent grid, added to the concat fuser's
/// output. The restore starts at zero, so an untrained fuser is the concat
/// fuser with the same weights.
pub fn self_attention_fuse(ctx: &mut Ctx, mcfg: &ModelConfig, fcfg: &FusionConfig, cam: Var, lidar: Var) -> Result<Var> {
    let e = patch_embed(ctx, "fuse.sa.embed", fcfg, cam, lidar)?;
    let [_, l, h, w] = <[usize; 4]>::try_from(ctx.tape.shape(e)).expect("rank 4");
    let flat = ctx.tape.reshape(e, &[l, h * w])?;
    let tokens = ctx.tape.permute(flat, &[1, 0])?;
    let q = ctx.linear("fuse.sa.q", tokens, l, l)?;
    let k = ctx.linear("fuse.sa.k", tokens, l, l)?;
    let v = ctx.linear("fuse.sa.v", tokens, l, l)?;
    let (a, _) = attention_core(&mut ctx.tape, q, k, v, fcfg.heads)?;
    let a = ctx.linear("fuse.sa.proj", a, l, l)?;
    let tokens = ctx.tape.add(tokens, a)?;
    let flat = ctx.tape.permute(tokens, &[1, 0])?;
    let grid = ctx.tape.reshape(flat, &[1, l, h, w])?;
    let (s, c) = (fcfg.stride, mcfg.fused_channels);
    let rw = ctx.param("fuse.sa.restore.w", &[l, c, s, s], Init::Zeros)?;
    let rb = ctx.param("fuse.sa.restore.b", &[c], Init::Zeros)?;
    let coarse = ctx.tape.conv_transpose2d(grid, rw, Some(rb), s, 0)?;
    let fine = concat_fuse(ctx, mcfg, cam, lidar)?;
    ctx.tape.add(coarse, fine)
}

/// Depth-wise 3x3 conv with bias over `[1, c, h, w]`.
fn depthwise(ctx: &mut Ctx, key: &str, x: Var) -> Result<Var> {
    let c = ctx.tape.shape(x)[1];
    ctx.conv_grouped(key, x, c, c, 3, 1, 1, true, c)
}

/// Pointwise (1x1) projection of channel-major maps `[cin, T]`.
fn pointwise(ctx: &mut Ctx, key: &str, x: Var, cin: usize, cout: usize) -> Result<Var> {
    let w = ctx.param(&format!("{key}.w"), &[cout, cin], Init::KaimingUniform { fan_in: cin })?;
    let b = ctx.param(&format!("{key}.b"), &[cout], Init::Zeros)?;
    let y = ctx.tape.matmul(w, x)?;
    ctx.tape.add_along(y, b, 0)
}

/// Split-depth transposed attention: patch embedding, two depth-wise
/// branches (one and two cascaded 3x3 convs), channel attention and a
/// pointwise MLP, each with a residual, then the transposed-conv restore.
pub fn sdta_fuse(ctx: &mut Ctx, mcfg: &ModelConfig, fcfg: &FusionConfig, cam: Var, lidar: Var) -> Result<Var> {
    let e = patch_embed(ctx, "fuse.sdta.embed", fcfg, cam, lidar)?;
    let [_, l, h, w] = <[usize; 4]>::try_from(ctx.tape.shape(e)).expect("rank 4");
    let half = l / 2;
    let g1 = ctx.tape.slice(e, 1, 0, half)?;
    let g2 = ctx.tape.slice(e, 1, half, l - half)?;
    let g1 = depthwise(ctx, "fuse.sdta.dw1", g1)?;
    let g2 = depthwise(ctx, "fuse.sdta.dw2a", g2)?;
    let g2 = depthwise(ctx, "fuse.sdta.dw2b", g2)?;
    let mixed = ctx.tape.concat(&[g1, g2], 1)?;
    let x = ctx.tape.reshape(mixed, &[l, h * w])?;

    let q = pointwise(ctx, "fuse.sdta.q", x, l, l)?;
    let k = pointwise(ctx, "fuse.sdta.k", x, l, l)?;
    let v = pointwise(ctx, "fuse.sdta.v", x, l, l)?;
    let temp = ctx.param("fuse.sdta.temperature", &[fcfg.heads], Init::Ones)?;
    let (a, _) = channel_attention(&mut ctx.tape, q, k, v, temp, fcfg.heads)?;
    let a = pointwise(ctx, "fuse.sdta.proj", a, l, l)?;
    let x = ctx.tape.add(x, a)?;

    let hidden = pointwise(ctx, "fuse.sdta.mlp1", x, l, 2 * l)?;
    let hidden = ctx.tape.relu(hidden);
    let m = pointwise(ctx, "fuse.sdta.mlp2", hidden, 2 * l, l)?;
    let x = ctx.tape.add(x, m)?;
    let grid = ctx.tape.reshape(x, &[1, l, h, w])?;
    restore(ctx, "fuse.sdta.restore", mcfg, fcfg, grid)
}
