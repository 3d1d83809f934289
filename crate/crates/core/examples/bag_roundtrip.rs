//! Encode a bag in the binary bag format, dump its header, and decode it back.

use std::path::Path;

use bagforge::datastore::{decode_bag, encode_bag};
use bagforge::numcore::Tensor;
use bagforge::Bag;

fn main() -> bagforge::Result<()> {
    let rows = vec![vec![0.25f32, -1.0, 2.5, 0.0], vec![1.0, 1.0, -0.5, 3.0], vec![0.0, 0.5, 0.5, 0.5]];
    let bag = Bag::new("TMA2-C04", 1, Tensor::from_rows(&rows)?)?;

    let bytes = encode_bag(&bag, 4)?;
    println!("{} bytes; header:", bytes.len());
    for (i, chunk) in bytes[4..28].chunks(4).enumerate() {
        let name = ["version", "d", "n", "k", "label", "id_len"][i];
        println!("  {name:<8} {}", u32::from_le_bytes(chunk.try_into().unwrap()));
    }

    let (header, back) = decode_bag(&bytes, Path::new("<memory>"))?;
    assert_eq!(back, bag);
    println!("decoded {} ({} x {}), label {}", header.core_id, back.len(), back.dim(), back.label);

    let mut corrupt = bytes.clone();
    corrupt.truncate(bytes.len() - 3);
    match decode_bag(&corrupt, Path::new("<truncated>")) {
        Err(e) => println!("truncated copy: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
