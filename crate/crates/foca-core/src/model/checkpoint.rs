//! Checkpoint file format.
//!
//! ```text
//! "FOCA" | version u16 LE | mode-tag (u8 len + utf8) | config JSON (u32 LE len + bytes)
//!        | block count u32 LE
//!        | per block: name (u16 LE len + utf8) | ndim u8 | dims u32 LE each
//!                     | values f64 LE, row-major
//! ```
//!
//! Blocks appear in the canonical order of [`ModelParams::blocks`]; reading
//! reconstructs the parameter structure from the block shapes, so any conv
//! width round-trips.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};

use crate::error::{FocaError, Result};
use crate::hca::HcaParams;
use crate::model::layers::{ConvBlockParams, Dense};
use crate::model::train::TrainConfig;
use crate::model::{ConcatParams, FusionParams, Mode, ModelParams, ParamBlock, UnimodalParams};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FOCA";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint(path: &Path, cfg: &TrainConfig, params: &ModelParams) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let tag = params.mode().tag().as_bytes();
    buf.push(tag.len() as u8);
    buf.extend_from_slice(tag);
    let cfg_json = serde_json::to_vec(cfg)?;
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    let blocks = params.blocks();
    buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in &blocks {
        let name = b.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(b.shape.len() as u8);
        for &d in &b.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &b.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(FocaError::Malformed("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<(TrainConfig, ModelParams)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(FocaError::Malformed(
            "bad checkpoint magic, expected \"FOCA\"".into(),
        ));
    }
    let version = c.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(FocaError::Malformed(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let tag_len = c.u8()? as usize;
    let mode = Mode::from_tag(
        std::str::from_utf8(c.take(tag_len)?)
            .map_err(|_| FocaError::Malformed("mode tag is not utf8".into()))?,
    )?;
    let cfg_len = c.u32()? as usize;
    let cfg: TrainConfig = serde_json::from_slice(c.take(cfg_len)?)?;
    let n_blocks = c.u32()? as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| FocaError::Malformed("block name is not utf8".into()))?
            .to_string();
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(c.take(8)?.try_into().unwrap()));
        }
        blocks.push(ParamBlock { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(FocaError::Malformed(format!(
            "{} trailing bytes after checkpoint blocks",
            bytes.len() - c.pos
        )));
    }
    let params = params_from_blocks(mode, blocks)?;
    Ok((cfg, params))
}

struct BlockReader {
    blocks: std::collections::VecDeque<ParamBlock>,
}

impl BlockReader {
    fn next(&mut self, want: &str, ndim: usize) -> Result<ParamBlock> {
        let b = self
            .blocks
            .pop_front()
            .ok_or_else(|| FocaError::Malformed(format!("missing checkpoint block {want}")))?;
        if b.name != want || b.shape.len() != ndim {
            return Err(FocaError::Malformed(format!(
                "expected block {want} with {ndim} dims, found {} with {}",
                b.name,
                b.shape.len()
            )));
        }
        Ok(b)
    }

    fn arr1(&mut self, want: &str) -> Result<Array1<f64>> {
        let b = self.next(want, 1)?;
        Ok(Array1::from(b.data))
    }

    fn arr2(&mut self, want: &str) -> Result<Array2<f64>> {
        let b = self.next(want, 2)?;
        Array2::from_shape_vec((b.shape[0], b.shape[1]), b.data)
            .map_err(|e| FocaError::Malformed(format!("block {want}: {e}")))
    }

    fn arr3(&mut self, want: &str) -> Result<Array3<f64>> {
        let b = self.next(want, 3)?;
        Array3::from_shape_vec((b.shape[0], b.shape[1], b.shape[2]), b.data)
            .map_err(|e| FocaError::Malformed(format!("block {want}: {e}")))
    }

    fn conv(&mut self, prefix: &str) -> Result<ConvBlockParams> {
        Ok(ConvBlockParams {
            w1: self.arr2(&format!("{prefix}.w1"))?,
            b1: self.arr1(&format!("{prefix}.b1"))?,
            w2: self.arr3(&format!("{prefix}.w2"))?,
            b2: self.arr1(&format!("{prefix}.b2"))?,
        })
    }

    fn dense(&mut self, prefix: &str) -> Result<Dense> {
        Ok(Dense {
            w: self.arr2(&format!("{prefix}.w"))?,
            b: self.arr1(&format!("{prefix}.b"))?,
        })
    }

    fn hca(&mut self) -> Result<HcaParams> {
        Ok(HcaParams {
            w_q_audio: self.arr2("hca.w_q_audio")?,
            w_k_audio: self.arr2("hca.w_k_audio")?,
            w_v_audio: self.arr2("hca.w_v_audio")?,
            w_q_visual: self.arr2("hca.w_q_visual")?,
            w_k_visual: self.arr2("hca.w_k_visual")?,
            w_v_visual: self.arr2("hca.w_v_visual")?,
        })
    }

    fn finish(self) -> Result<()> {
        if let Some(b) = self.blocks.front() {
            return Err(FocaError::Malformed(format!(
                "unexpected extra checkpoint block {}",
                b.name
            )));
        }
        Ok(())
    }
}

fn params_from_blocks(mode: Mode, blocks: Vec<ParamBlock>) -> Result<ModelParams> {
    let mut r = BlockReader {
        blocks: blocks.into(),
    };
    let params = match mode {
        Mode::UnimodalAudio | Mode::UnimodalVisual => {
            let p = UnimodalParams {
                conv: r.conv("conv")?,
                fc: r.dense("fc")?,
                out: r.dense("out")?,
            };
            if mode == Mode::UnimodalAudio {
                ModelParams::UnimodalAudio(p)
            } else {
                ModelParams::UnimodalVisual(p)
            }
        }
        Mode::Concat => ModelParams::Concat(ConcatParams {
            conv_audio: r.conv("conv_audio")?,
            conv_visual: r.conv("conv_visual")?,
            fc1: r.dense("fc1")?,
            fc2: r.dense("fc2")?,
            out: r.dense("out")?,
        }),
        Mode::EuclidXattn | Mode::Foca => {
            let p = FusionParams {
                conv_audio: r.conv("conv_audio")?,
                conv_visual: r.conv("conv_visual")?,
                attn: r.hca()?,
                fc1: r.dense("fc1")?,
                fc2: r.dense("fc2")?,
                out: r.dense("out")?,
            };
            if mode == Mode::EuclidXattn {
                ModelParams::EuclidXattn(p)
            } else {
                ModelParams::Foca(p)
            }
        }
    };
    r.finish()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_roundtrip_all_modes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            d_audio: 16,
            d_visual: 20,
            n_classes: 3,
            ..Default::default()
        };
        for (i, mode) in Mode::ALL.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(7 + i as u64);
            let params = ModelParams::init_with_channels(
                mode,
                cfg.d_audio,
                cfg.d_visual,
                cfg.n_classes,
                2,
                3,
                &mut rng,
            )
            .unwrap();
            let path = dir.path().join(format!("{}.ckpt", mode.tag()));
            write_checkpoint(&path, &cfg, &params).unwrap();
            let (cfg2, params2) = read_checkpoint(&path).unwrap();
            assert_eq!(cfg, cfg2);
            assert_eq!(params, params2, "mode {mode}");
        }
    }

    #[test]
    fn checkpoint_starts_with_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            d_audio: 16,
            d_visual: 16,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params =
            ModelParams::init_with_channels(Mode::UnimodalAudio, 16, 16, 2, 2, 3, &mut rng)
                .unwrap();
        let path = dir.path().join("c.ckpt");
        write_checkpoint(&path, &cfg, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"FOCA");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    }

    #[test]
    fn checkpoint_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
