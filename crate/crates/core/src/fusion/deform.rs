use super::{stacked_channels, FusionConfig, PoseInput};
use crate::blocks::{Ctx, Init, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Flattened poses through a two-layer MLP, broadcast to `[1, C_pose, H, W]`.
pub fn pose_embed(ctx: &mut Ctx, fcfg: &FusionConfig, pose: &PoseInput, target: (usize, usize)) -> Result<Var> {
    let flat = pose.flatten();
    let n = flat.len();
    let x = ctx.tape.constant(Tensor::new([1, n], flat)?);
    let h = ctx.linear("fuse.pose.fc1", x, n, fcfg.pose_hidden)?;
    let h = ctx.tape.relu(h);
    let o = ctx.linear("fuse.pose.fc2", h, fcfg.pose_hidden, fcfg.pose_channels)?;
    let o = ctx.tape.reshape(o, &[1, fcfg.pose_channels, 1, 1])?;
    ctx.tape.grid_resample(o, target)
}

/// Deformable convolution, stride 1 and same padding: tap `t` of output
/// pixel `(i, j)` reads the input bilinearly at
/// `(i + ki - K/2 + offsets[2t], j + kj - K/2 + offsets[2t + 1])`.
/// `input` is `[1, C, H, W]` (or `[C, H, W]`), `offsets` `[1, 2K², H, W]`
/// (or `[2K², H, W]`), `kernel` `[O, C, K, K]`; output `[1, O, H, W]`.
pub fn deformable_conv(tape: &mut Tape, input: Var, offsets: Var, kernel: Var) -> Result<Var> {
    let (c, h, w) = match *tape.shape(input) {
        [1, c, h, w] | [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape("deformable_conv", format!("input {s:?}"))),
    };
    let (o, kk) = match *tape.shape(kernel) {
        [o, kc, k, k2] if kc == c && k == k2 => (o, k),
        ref s => return Err(Error::shape("deformable_conv", format!("kernel {s:?} for {c} input channels"))),
    };
    let taps = kk * kk;
    let off_ok = matches!(*tape.shape(offsets), [1, n, oh, ow] | [n, oh, ow] if n == 2 * taps && oh == h && ow == w);
    if !off_ok {
        return Err(Error::shape(
            "deformable_conv",
            format!("offsets {:?}, expected {} channels at {h}x{w}", tape.shape(offsets), 2 * taps),
        ));
    }
    let x = tape.reshape(input, &[1, c, h, w])?;
    let off = tape.reshape(offsets, &[2 * taps, h * w])?;
    let pad = (kk / 2) as f64;
    let mut columns = Vec::with_capacity(taps);
    for t in 0..taps {
        let (ki, kj) = ((t / kk) as f64, (t % kk) as f64);
        let base = Tensor::from_fn([h * w, 2], |e| {
            let p = e / 2;
            if e % 2 == 0 {
                (p / w) as f64 + ki - pad
            } else {
                (p % w) as f64 + kj - pad
            }
        });
        let d = tape.slice(off, 0, 2 * t, 2)?;
        let d = tape.permute(d, &[1, 0])?;
        let b = tape.constant(base);
        let coords = tape.add(b, d)?;
        let coords = tape.reshape(coords, &[1, h * w, 2])?;
        let s = tape.bilinear_sample(x, coords)?;
        columns.push(tape.reshape(s, &[c, h * w])?);
    }
    let cols = tape.concat(&columns, 0)?;
    // kernel [O, C, K, K] -> [O, K*K*C] matching the (tap, channel) column order
    let kp = tape.permute(kernel, &[0, 2, 3, 1])?;
    let kp = tape.reshape(kp, &[o, taps * c])?;
    let y = tape.matmul(kp, cols)?;
    tape.reshape(y, &[1, o, h, w])
}

/// Offsets predicted from `[cam, lidar, pose embedding]` drive a deformable
/// conv over the stacked camera and LiDAR channels. The offset conv starts
/// at zero, so an untrained fuser is an ordinary conv.
pub fn pose_dcn_fuse(ctx: &mut Ctx, mcfg: &ModelConfig, fcfg: &FusionConfig, cam: Var, lidar: Var, pose: &PoseInput) -> Result<Var> {
    let cin = stacked_channels(ctx, cam, lidar)?;
    let (h, w) = (ctx.tape.shape(cam)[2], ctx.tape.shape(cam)[3]);
    let p = pose_embed(ctx, fcfg, pose, (h, w))?;
    let x = ctx.tape.concat(&[cam, lidar], 1)?;
    let with_pose = ctx.tape.concat(&[x, p], 1)?;
    let n_off = fcfg.offset_channels();
    let ow = ctx.param("fuse.dcn.offset.w", &[n_off, cin + fcfg.pose_channels, 3, 3], Init::Zeros)?;
    let ob = ctx.param("fuse.dcn.offset.b", &[n_off], Init::Zeros)?;
    let offsets = ctx.tape.conv2d(with_pose, ow, Some(ob), 1, 1)?;
    let k = fcfg.patch;
    let kernel = ctx.param("fuse.dcn.w", &[mcfg.fused_channels, cin, k, k], Init::KaimingUniform { fan_in: cin * k * k })?;
    let bias = ctx.param("fuse.dcn.b", &[mcfg.fused_channels], Init::Zeros)?;
    let y = deformable_conv(&mut ctx.tape, x, offsets, kernel)?;
    ctx.tape.add_along(y, bias, 1)
}
