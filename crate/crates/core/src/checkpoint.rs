//! Versioned binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!   magic "NIRFCKPT", format version u32,
//!   config: u64 length + TOML bytes of the `NetConfig`,
//!   u64 parameter count, then per parameter:
//!     u64 name length + UTF-8 name, 4×u64 shape, f64 data (row-major),
//!   u8 optimizer flag; if 1: u64 step count followed by the first and
//!   second moment tensors per parameter in the same order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::net::{net_init, DenoiserNet, NetConfig};
use crate::optim::OptimState;
use crate::tensor::{Shape4, Tensor4};

const MAGIC: &[u8; 8] = b"NIRFCKPT";
const VERSION: u32 = 1;

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_tensor(w: &mut impl Write, t: &Tensor4) -> std::io::Result<()> {
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_tensor(r: &mut impl Read, shape: Shape4) -> std::io::Result<Tensor4> {
    let mut data = vec![0.0f64; shape.numel()];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(Tensor4::from_vec(shape, data).expect("shape matches"))
}

pub fn save_checkpoint(
    path: &Path,
    net: &DenoiserNet,
    optim: Option<&OptimState>,
) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io { path: path.to_path_buf(), source: e };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let inner = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg = toml::to_string(net.config()).expect("config serializes");
        write_u64(w, cfg.len() as u64)?;
        w.write_all(cfg.as_bytes())?;
        let params = net.params();
        write_u64(w, params.len() as u64)?;
        for p in &params {
            write_u64(w, p.name.len() as u64)?;
            w.write_all(p.name.as_bytes())?;
            for d in p.value.shape().as_array() {
                write_u64(w, d as u64)?;
            }
            write_tensor(w, &p.value)?;
        }
        match optim {
            Some(state) => {
                w.write_all(&[1u8])?;
                write_u64(w, state.step)?;
                for t in state.m.iter().chain(state.v.iter()) {
                    write_tensor(w, t)?;
                }
            }
            None => w.write_all(&[0u8])?,
        }
        w.flush()
    };
    inner(&mut w).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<(DenoiserNet, Option<OptimState>)> {
    let io_err = |e: std::io::Error| Error::Io { path: path.to_path_buf(), source: e };
    let file = File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf).map_err(io_err)?;
    let version = u32::from_le_bytes(vbuf);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }

    let cfg_len = read_u64(&mut r).map_err(io_err)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes).map_err(io_err)?;
    let cfg_text = String::from_utf8(cfg_bytes)
        .map_err(|e| Error::Checkpoint(format!("config not UTF-8: {e}")))?;
    let cfg: NetConfig =
        toml::from_str(&cfg_text).map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;

    let mut net = net_init(&cfg)?;
    let n_params = read_u64(&mut r).map_err(io_err)? as usize;
    {
        let mut params = net.params_mut();
        if n_params != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, config implies {}",
                n_params,
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let name_len = read_u64(&mut r).map_err(io_err)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(io_err)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::Checkpoint(format!("param name not UTF-8: {e}")))?;
            if name != p.name {
                return Err(Error::Checkpoint(format!(
                    "parameter order mismatch: file has '{}', expected '{}'",
                    name, p.name
                )));
            }
            let mut dims = [0usize; 4];
            for d in dims.iter_mut() {
                *d = read_u64(&mut r).map_err(io_err)? as usize;
            }
            let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
            if shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for '{}': file {:?}, expected {:?}",
                    p.name,
                    shape.as_array(),
                    p.value.shape().as_array()
                )));
            }
            p.value = read_tensor(&mut r, shape).map_err(io_err)?;
            p.zero_grad();
        }
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag).map_err(io_err)?;
    let optim = if flag[0] == 1 {
        let step = read_u64(&mut r).map_err(io_err)?;
        let shapes: Vec<Shape4> = net.params().iter().map(|p| p.value.shape()).collect();
        let mut m = Vec::with_capacity(shapes.len());
        for &s in &shapes {
            m.push(read_tensor(&mut r, s).map_err(io_err)?);
        }
        let mut v = Vec::with_capacity(shapes.len());
        for &s in &shapes {
            v.push(read_tensor(&mut r, s).map_err(io_err)?);
        }
        let mut state = OptimState::new(&net.params());
        state.m = m;
        state.v = v;
        state.step = step;
        Some(state)
    } else {
        None
    };
    Ok((net, optim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::FusionMode;

    fn tiny_net() -> DenoiserNet {
        let cfg = NetConfig {
            scales: 2,
            base_channels: 4,
            blocks_per_scale: 1,
            fusion_mode: FusionMode::Sfm,
            sfm_kernel_size: 3,
            seed: 5,
            ..NetConfig::default()
        };
        net_init(&cfg).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let net = tiny_net();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&path, &net, None).unwrap();
        let (loaded, optim) = load_checkpoint(&path).unwrap();
        assert!(optim.is_none());
        for (a, b) in net.params().iter().zip(loaded.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn roundtrip_with_optimizer_state() {
        let net = tiny_net();
        let mut state = OptimState::new(&net.params());
        state.step = 17;
        state.m[0].fill(0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&path, &net, Some(&state)).unwrap();
        let (_, loaded) = load_checkpoint(&path).unwrap();
        let loaded = loaded.unwrap();
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.m[0], state.m[0]);
        assert_eq!(loaded.v[1], state.v[1]);
    }

    #[test]
    fn garbage_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
