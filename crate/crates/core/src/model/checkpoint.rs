//! Checkpoint files: a text header followed by little-endian `f32`
//! parameter blocks in declaration order.
//!
//! ```text
//! ahem-checkpoint 1
//! seed 7
//! num_classes 150
//! embedding_dim 64
//! input 64 32
//! layers 8
//! conv in=3 out=8 kernel=3x3 stride=2 pad=1
//! ...
//! blocks 10
//! layer0.weight 216
//! ...
//! end
//! <binary>
//! ```

use std::fs;
use std::path::Path;

use super::arch::{ArchSpec, Layer};
use super::params::ModelParams;
use super::{ModelError, Result};

pub const CHECKPOINT_MAGIC: &str = "ahem-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub seed: u64,
}

pub fn encode_checkpoint(params: &ModelParams, seed: u64) -> Vec<u8> {
    let mut header = format!(
        "{CHECKPOINT_MAGIC}\nseed {seed}\nnum_classes {}\nembedding_dim {}\ninput {} {}\nlayers {}\n",
        params.num_classes,
        params.embedding_dim,
        params.input.0,
        params.input.1,
        params.arch.layers.len()
    );
    for layer in &params.arch.layers {
        header.push_str(&format!("{layer}\n"));
    }
    header.push_str(&format!("blocks {}\n", params.blocks.len()));
    for b in &params.blocks {
        header.push_str(&format!("{} {}\n", b.name, b.values.len()));
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    for b in &params.blocks {
        for v in &b.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: String| ModelError::Checkpoint(msg);
    let mut pos = 0usize;
    let mut line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header".into()))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8".into()))
    };
    let magic = line()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("unknown format {magic:?}")));
    }
    fn field<'a>(l: &'a str, key: &str) -> Result<Vec<&'a str>> {
        let mut parts = l.split(' ');
        if parts.next() != Some(key) {
            return Err(ModelError::Checkpoint(format!("expected {key}, found {l:?}")));
        }
        Ok(parts.collect())
    }
    fn num<T: std::str::FromStr>(v: Option<&&str>) -> Result<T> {
        v.and_then(|s| s.parse().ok()).ok_or_else(|| ModelError::Checkpoint(format!("bad number {v:?}")))
    }
    let seed: u64 = num(field(line()?, "seed")?.first())?;
    let num_classes: usize = num(field(line()?, "num_classes")?.first())?;
    let embedding_dim: usize = num(field(line()?, "embedding_dim")?.first())?;
    let input = field(line()?, "input")?;
    let input: (usize, usize) = (num(input.first())?, num(input.get(1))?);
    let layer_count: usize = num(field(line()?, "layers")?.first())?;
    let layers = (0..layer_count).map(|_| line()?.parse::<Layer>()).collect::<Result<Vec<_>>>()?;
    let mut params = ModelParams::zeroed(ArchSpec { layers }, input, num_classes)?;
    if params.embedding_dim != embedding_dim {
        return Err(bad(format!("embedding_dim {embedding_dim} disagrees with architecture output {}", params.embedding_dim)));
    }
    let block_count: usize = num(field(line()?, "blocks")?.first())?;
    if block_count != params.blocks.len() {
        return Err(bad(format!("{block_count} blocks, architecture has {}", params.blocks.len())));
    }
    for i in 0..block_count {
        let l = line()?;
        let (name, count) = l.split_once(' ').ok_or_else(|| bad(format!("bad block line {l:?}")))?;
        let block = &params.blocks[i];
        if name != block.name || count.parse::<usize>().ok() != Some(block.values.len()) {
            return Err(bad(format!("block {i} is {l:?}, expected {} {}", block.name, block.values.len())));
        }
    }
    if line()? != "end" {
        return Err(bad("missing end marker".into()));
    }
    let body = &bytes[pos..];
    let expected = params.param_count() * 4;
    if body.len() != expected {
        return Err(bad(format!("parameter data is {} bytes, expected {expected}", body.len())));
    }
    let mut floats = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    for block in &mut params.blocks {
        block.values.iter_mut().for_each(|v| *v = floats.next().expect("length checked"));
    }
    Ok(Checkpoint { params, seed })
}

pub fn write_checkpoint(path: &Path, params: &ModelParams, seed: u64) -> Result<()> {
    fs::write(path, encode_checkpoint(params, seed)).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_exact_round_trip() {
        let p = ModelParams::new(ArchSpec::reference(16), (32, 16), 7, 3).unwrap();
        let bytes = encode_checkpoint(&p, 3);
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.seed, 3);
        assert_eq!(ck.params.blocks().iter().map(|b| &b.values).collect::<Vec<_>>(), p.blocks().iter().map(|b| &b.values).collect::<Vec<_>>());
        assert_eq!(encode_checkpoint(&ck.params, ck.seed), bytes);
        let text = String::from_utf8_lossy(&bytes[..200]);
        assert!(text.starts_with("ahem-checkpoint 1\nseed 3\nnum_classes 7\nembedding_dim 16\ninput 32 16\nlayers 8\nconv in=3"));
    }

    #[test]
    fn corrupt_files_rejected() {
        let p = ModelParams::new(ArchSpec::reference(4), (8, 4), 2, 3).unwrap();
        let bytes = encode_checkpoint(&p, 1);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"something else\n").is_err());
        let mut tampered = String::from_utf8_lossy(&bytes).replace("num_classes 2", "num_classes 3").into_bytes();
        tampered.truncate(bytes.len());
        assert!(decode_checkpoint(&tampered).is_err());
    }
}
