//! Binary bag container.
//!
//! Layout, all integers little-endian u32:
//!
//! ```text
//! 0   magic "MILB"
//! 4   version (1)
//! 8   d
//! 12  N
//! 16  K
//! 20  label
//! 24  core_id byte length L
//! 28  core_id, UTF-8, L bytes
//! 28+L  N·d f32 little-endian values, row-major
//! ```

use std::path::Path;

use crate::bag::Bag;
use crate::error::{domain_err, Error, Result};
use crate::numcore::Tensor;

use super::io::{read_file, write_atomic, Reader};

pub const BAG_MAGIC: &[u8; 4] = b"MILB";
pub const BAG_VERSION: u32 = 1;
pub const BAG_HEADER_LEN: usize = 28;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BagHeader {
    pub version: u32,
    pub d: u32,
    pub n: u32,
    pub k: u32,
    pub label: u32,
    pub core_id: String,
}

pub fn encode_bag(bag: &Bag, k: u32) -> Result<Vec<u8>> {
    if bag.label >= k {
        return Err(domain_err!("bag {} label {} not below K={k}", bag.core_id, bag.label));
    }
    let id = bag.core_id.as_bytes();
    let mut out = Vec::with_capacity(BAG_HEADER_LEN + id.len() + 4 * bag.instances.len());
    out.extend_from_slice(BAG_MAGIC);
    for v in [
        BAG_VERSION,
        bag.dim() as u32,
        bag.len() as u32,
        k,
        bag.label,
        id.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(id);
    for v in bag.instances.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_bag(bytes: &[u8], path: &Path) -> Result<(BagHeader, Bag)> {
    let mut r = Reader::new(bytes, path);
    r.magic(BAG_MAGIC)?;
    let version = r.u32("version")?;
    if version != BAG_VERSION {
        return Err(r.error_at(4, format!("unsupported version {version}, expected {BAG_VERSION}")));
    }
    let d = r.u32("d")?;
    let n = r.u32("N")?;
    let k = r.u32("K")?;
    let label = r.u32("label")?;
    let id_len = r.u32("core_id length")? as usize;
    if d == 0 {
        return Err(r.error_at(8, "embedding width d is zero".into()));
    }
    if n == 0 {
        return Err(r.error_at(12, "bag has zero instances".into()));
    }
    if label >= k {
        return Err(r.error_at(20, format!("label {label} not below K={k}")));
    }
    let core_id = r.utf8(id_len, "core_id")?;
    let count = n as usize * d as usize;
    let payload_start = r.pos();
    let payload = r.remaining();
    if payload.len() != 4 * count {
        return Err(r.error_at(
            payload_start as u64,
            format!(
                "payload length mismatch: expected {} bytes (4·N·d = 4·{n}·{d}), found {}",
                4 * count,
                payload.len()
            ),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let instances = Tensor::from_vec(n as usize, d as usize, data)?;
    let bag = Bag::new(core_id.clone(), label, instances).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: (BAG_HEADER_LEN + id_len) as u64,
        message: e.to_string(),
    })?;
    Ok((
        BagHeader {
            version,
            d,
            n,
            k,
            label,
            core_id,
        },
        bag,
    ))
}

pub fn write_bag(bag: &Bag, k: u32, path: &Path) -> Result<()> {
    write_atomic(path, &encode_bag(bag, k)?)
}

pub fn read_bag_file(path: &Path) -> Result<(BagHeader, Bag)> {
    let bytes = read_file(path)?;
    decode_bag(&bytes, path)
}

pub fn read_bag(path: &Path) -> Result<Bag> {
    read_bag_file(path).map(|(_, b)| b)
}
