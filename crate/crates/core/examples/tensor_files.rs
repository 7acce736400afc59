//! Writing and reading tensors in the HAKD binary format.

use hetero_akd::tensor_io::{load_tensor, read_tensor, save_tensor, write_tensor};
use hetero_akd::{DType, Result, Tensor};

fn main() -> Result<()> {
    let t = Tensor::new(&[2, 3], vec![0.1, 0.2, 0.3, 1.0, 2.0, 3.0])?;

    let mut bytes = Vec::new();
    write_tensor(&mut bytes, &t)?;
    println!("f64 tensor {:?} -> {} bytes, magic {:?}", t.dims(), bytes.len(), std::str::from_utf8(&bytes[..4]).unwrap());
    assert_eq!(read_tensor(bytes.as_slice())?, t);

    let half = t.to_dtype(DType::F32);
    let mut small = Vec::new();
    write_tensor(&mut small, &half)?;
    println!("same tensor as f32 -> {} bytes, first value {:.10}", small.len(), half.data()[0]);

    let dir = std::env::temp_dir().join("hetero_akd_tensor_files");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("example.hakd");
    save_tensor(&path, &t)?;
    let back = load_tensor(&path)?;
    println!("round trip through {} exact: {}", path.display(), back == t);

    match read_tensor(&b"NOPE"[..]) {
        Err(e) => println!("bad magic is rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
