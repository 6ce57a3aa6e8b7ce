//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic            8 bytes  "RDLNET01"
//! input_dim        u32
//! n_recurrent      u32, then n_recurrent × u32 units
//! n_dense          u32, then n_dense × u32 units
//! output_dim       u32
//! dropout_rate     f64
//! layer_norm       u8 (0/1)
//! final_kind       u8 (0 none, 1 relu, 2 softmax per group)
//! group_size       u32 (0 unless final_kind = 2)
//! n_params         u64
//! params           n_params × f64
//! ```

use std::io::{Read, Write};

use super::{FinalActivation, Network, NetworkSpec, NnError};

const MAGIC: &[u8; 8] = b"RDLNET01";

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

fn get_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N], NnError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| NnError::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn get_u32(r: &mut impl Read) -> Result<usize, NnError> {
    Ok(u32::from_le_bytes(get_bytes(r)?) as usize)
}

impl Network {
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<(), NnError> {
        let s = self.spec();
        let io = |e: std::io::Error| NnError::Checkpoint(e.to_string());
        w.write_all(MAGIC).map_err(io)?;
        put_u32(w, s.input_dim).map_err(io)?;
        put_u32(w, s.recurrent_layers.len()).map_err(io)?;
        for &u in &s.recurrent_layers {
            put_u32(w, u).map_err(io)?;
        }
        put_u32(w, s.dense_layers.len()).map_err(io)?;
        for &u in &s.dense_layers {
            put_u32(w, u).map_err(io)?;
        }
        put_u32(w, s.output_dim).map_err(io)?;
        w.write_all(&s.dropout_rate.to_le_bytes()).map_err(io)?;
        w.write_all(&[s.layer_norm as u8]).map_err(io)?;
        let (kind, group) = match s.final_activation {
            FinalActivation::None => (0u8, 0),
            FinalActivation::Relu => (1, 0),
            FinalActivation::SoftmaxPerGroup(g) => (2, g),
        };
        w.write_all(&[kind]).map_err(io)?;
        put_u32(w, group).map_err(io)?;
        w.write_all(&(self.params().len() as u64).to_le_bytes()).map_err(io)?;
        let mut buf = Vec::with_capacity(self.params().len() * 8);
        for p in self.params() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Network, NnError> {
        let magic: [u8; 8] = get_bytes(r)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint("bad magic bytes".into()));
        }
        let input_dim = get_u32(r)?;
        let n_rec = get_u32(r)?;
        if n_rec > 64 {
            return Err(NnError::Checkpoint(format!("implausible layer count {n_rec}")));
        }
        let recurrent = (0..n_rec).map(|_| get_u32(r)).collect::<Result<Vec<_>, _>>()?;
        let n_dense = get_u32(r)?;
        if n_dense > 64 {
            return Err(NnError::Checkpoint(format!("implausible layer count {n_dense}")));
        }
        let dense = (0..n_dense).map(|_| get_u32(r)).collect::<Result<Vec<_>, _>>()?;
        let output_dim = get_u32(r)?;
        let dropout_rate = f64::from_le_bytes(get_bytes(r)?);
        let [norm] = get_bytes::<1>(r)?;
        let [kind] = get_bytes::<1>(r)?;
        let group = get_u32(r)?;
        let final_activation = match kind {
            0 => FinalActivation::None,
            1 => FinalActivation::Relu,
            2 => FinalActivation::SoftmaxPerGroup(group),
            k => return Err(NnError::Checkpoint(format!("unknown final activation {k}"))),
        };
        let spec = NetworkSpec {
            input_dim,
            recurrent_layers: recurrent,
            dense_layers: dense,
            output_dim,
            dropout_rate,
            layer_norm: norm != 0,
            final_activation,
        };
        spec.validate()?;
        let n = u64::from_le_bytes(get_bytes(r)?) as usize;
        if n != spec.parameter_count() {
            return Err(NnError::Checkpoint(format!(
                "parameter count {n} does not match architecture ({})",
                spec.parameter_count()
            )));
        }
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)
            .map_err(|e| NnError::Checkpoint(format!("truncated parameters: {e}")))?;
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Network::from_parameters(spec, params)
    }
}
