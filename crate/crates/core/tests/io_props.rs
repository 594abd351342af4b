use lightocc::io::{
    decode_mask, decode_occg, decode_tnsr, encode_mask, encode_occg, encode_tnsr, read_occg, read_tnsr, read_tnsr_as,
    write_occg, write_tnsr,
};
use lightocc::volume::{LabeledOccupancy, VisibilityMask};
use lightocc::Tensor;
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = [usize; 3]> {
    prop::array::uniform3(1usize..6)
}

proptest! {
    #[test]
    fn occg_round_trip(d in dims(), classes in 2usize..=255, seed in any::<u64>()) {
        let n = d.iter().product::<usize>();
        let labels: Vec<u8> = (0..n).map(|i| ((seed as usize).wrapping_add(i * 7) % classes) as u8).collect();
        let grid = LabeledOccupancy::new(d, classes, labels).unwrap();
        let bytes = encode_occg(&grid).unwrap();
        prop_assert_eq!(bytes.len(), 24 + n);
        prop_assert_eq!(&decode_occg(&bytes).unwrap(), &grid);
        prop_assert_eq!(encode_occg(&decode_occg(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn mask_round_trip(d in dims(), bits in prop::collection::vec(any::<bool>(), 125)) {
        let n = d.iter().product::<usize>();
        let mask = VisibilityMask::new(d, bits[..n].to_vec()).unwrap();
        prop_assert_eq!(decode_mask(&encode_mask(&mask).unwrap()).unwrap(), mask);
    }

    #[test]
    fn tnsr_round_trip_is_bit_exact(shape in prop::collection::vec(1usize..5, 0..4), raw in prop::collection::vec(any::<u64>(), 64)) {
        let n: usize = shape.iter().product();
        let t64 = Tensor::from_vec(&shape, raw[..n].iter().map(|&b| f64::from_bits(b)).collect()).unwrap();
        let back = decode_tnsr::<f64>(&encode_tnsr(&t64).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), t64.shape());
        prop_assert_eq!(back.payload_bytes(), t64.payload_bytes());
        let t32 = Tensor::from_vec(&shape, raw[..n].iter().map(|&b| f32::from_bits(b as u32)).collect()).unwrap();
        let back = decode_tnsr::<f32>(&encode_tnsr(&t32).unwrap()).unwrap();
        prop_assert_eq!(back.payload_bytes(), t32.payload_bytes());
    }
}

#[test]
fn files_round_trip_and_convert_precision() {
    let dir = tempfile::tempdir().unwrap();
    let grid = LabeledOccupancy::new([2, 2, 1], 18, vec![0, 5, 17, 11]).unwrap();
    let p = dir.path().join("nested/labels.occg");
    write_occg(&p, &grid).unwrap();
    assert_eq!(read_occg(&p).unwrap(), grid);

    let t = Tensor::<f32>::from_vec(&[3], vec![0.5, -1.25, 3.0]).unwrap();
    let q = dir.path().join("t.tnsr");
    write_tnsr(&q, &t).unwrap();
    assert_eq!(read_tnsr::<f32>(&q).unwrap(), t);
    assert!(read_tnsr::<f64>(&q).is_err());
    assert_eq!(read_tnsr_as::<f64>(&q).unwrap().data(), &[0.5, -1.25, 3.0]);
}
