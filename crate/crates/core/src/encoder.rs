//! Reference image encoder: patchify, project, ReLU, add learned positions.
//!
//! Stands in for a convolutional backbone; only the output contract
//! `[grid_h, grid_w, C]` matters downstream.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{AnydError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub image_ch: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
    pub speed_dim: usize,
}

impl EncoderConfig {
    /// Desk-scale reference: 36×64×3 input, 8×8 patches, 32 channels.
    pub fn desk() -> Self {
        EncoderConfig { image_h: 36, image_w: 64, image_ch: 3, patch_h: 8, patch_w: 8, channels: 32, speed_dim: 16 }
    }

    /// Full-size input (225×400) mapped onto an 8×13 grid with 28×30 patches;
    /// the leftover border (1 row, 10 columns) is center-cropped.
    pub fn paper() -> Self {
        EncoderConfig {
            image_h: 225,
            image_w: 400,
            image_ch: 3,
            patch_h: 28,
            patch_w: 30,
            channels: 512,
            speed_dim: 16,
        }
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch_h
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch_w
    }

    pub fn cells(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_h * self.patch_w * self.image_ch
    }

    /// Top-left corner of the center crop that the patch grid covers.
    pub fn crop_origin(&self) -> (usize, usize) {
        ((self.image_h - self.grid_h() * self.patch_h) / 2, (self.image_w - self.grid_w() * self.patch_w) / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let dims =
            [self.image_h, self.image_w, self.image_ch, self.patch_h, self.patch_w, self.channels, self.speed_dim];
        if dims.contains(&0) {
            return Err(AnydError::invalid("encoder dimensions must be positive"));
        }
        if self.patch_h > self.image_h || self.patch_w > self.image_w {
            return Err(AnydError::invalid("patch larger than image"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub patch_projection: ParamId,
    pub patch_bias: ParamId,
    pub position_embedding: ParamId,
    pub speed_weight: ParamId,
    pub speed_bias: ParamId,
}

impl EncoderParams {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (pl, c) = (cfg.patch_len(), cfg.channels);
        Ok(EncoderParams {
            patch_projection: store
                .add("encoder.patch_projection", Tensor::randn(vec![pl, c], (2.0 / pl as f64).sqrt(), rng))?,
            patch_bias: store.add("encoder.patch_bias", Tensor::zeros(vec![c]))?,
            position_embedding: store
                .add("encoder.position_embedding", Tensor::randn(vec![cfg.grid_h(), cfg.grid_w(), c], 0.02, rng))?,
            speed_weight: store.add("encoder.speed_weight", Tensor::randn(vec![1, cfg.speed_dim], 0.1, rng))?,
            speed_bias: store.add("encoder.speed_bias", Tensor::zeros(vec![cfg.speed_dim]))?,
        })
    }
}

/// Rearranges the cropped image into one row per grid cell, each row holding
/// the patch pixels in (row, column, channel) order.
pub fn patchify(img: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let want = [cfg.image_h, cfg.image_w, cfg.image_ch];
    if img.shape() != want {
        return Err(AnydError::shape(format!("image {:?}, encoder expects {want:?}", img.shape())));
    }
    let (oy, ox) = cfg.crop_origin();
    let (gh, gw, ph, pw, ch) = (cfg.grid_h(), cfg.grid_w(), cfg.patch_h, cfg.patch_w, cfg.image_ch);
    let src = img.data();
    let mut out = Vec::with_capacity(gh * gw * cfg.patch_len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..ph {
                let y = oy + gy * ph + py;
                let start = ((y * cfg.image_w) + ox + gx * pw) * ch;
                out.extend_from_slice(&src[start..start + pw * ch]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![gh * gw, cfg.patch_len()], out))
}

/// `F = ReLU(patchify(img)·W + b) + position_embedding`, shaped `[grid_h, grid_w, C]`.
pub fn encode_image(
    tape: &mut Tape,
    vars: &Bindings,
    p: &EncoderParams,
    cfg: &EncoderConfig,
    img: &Tensor,
) -> Result<Var> {
    if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(AnydError::invalid("image values must lie in [0, 1]"));
    }
    let patches = tape.constant(patchify(img, cfg)?);
    let proj = tape.matmul(patches, vars[p.patch_projection])?;
    let proj = tape.add_last(proj, vars[p.patch_bias])?;
    let act = tape.relu(proj);
    let pos = tape.reshape(vars[p.position_embedding], vec![cfg.cells(), cfg.channels])?;
    let f = tape.add(act, pos)?;
    tape.reshape(f, vec![cfg.grid_h(), cfg.grid_w(), cfg.channels])
}

/// `ReLU(v·W + b)` for a speed in m/s.
pub fn embed_speed(tape: &mut Tape, vars: &Bindings, p: &EncoderParams, speed: f64) -> Result<Var> {
    if !(speed >= 0.0 && speed.is_finite()) {
        return Err(AnydError::invalid(format!("speed must be a nonnegative number, got {speed}")));
    }
    let scaled = tape.scale(vars[p.speed_weight], speed);
    let dim = tape.shape(scaled)[1];
    let flat = tape.reshape(scaled, vec![dim])?;
    let pre = tape.add(flat, vars[p.speed_bias])?;
    Ok(tape.relu(pre))
}
