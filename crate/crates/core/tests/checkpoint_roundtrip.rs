use citrus_core::checkpoint::{from_bytes, load, save, to_bytes};
use citrus_core::{init_weights, Arch, Layer};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn round_trip_is_bitwise(seed in any::<u64>(), sizes in prop::collection::vec(1usize..9, 2..5)) {
        let net = init_weights(&Arch(sizes), seed).unwrap();
        let bytes = to_bytes(&net);
        let back = from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.layers().len(), net.layers().len());
        for (a, b) in back.layers().iter().zip(net.layers()) {
            if let (Layer::Affine { weight: wa, bias: ba }, Layer::Affine { weight: wb, bias: bb }) = (a, b) {
                for (x, y) in wa.data().iter().chain(ba.data()).zip(wb.data().iter().chain(bb.data())) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
        prop_assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn any_single_bit_flip_is_caught(seed in any::<u64>(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let net = init_weights(&Arch(vec![2, 4, 2]), seed).unwrap();
        let mut bytes = to_bytes(&net);
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(from_bytes(&bytes).is_err());
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ctrw");
    let net = init_weights(&Arch(vec![2, 3, 3, 2]), 5).unwrap();
    save(&net, &path).unwrap();
    assert_eq!(load(&path).unwrap(), net);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"CTRW");
    assert!(load(&dir.path().join("missing.ctrw")).is_err());
}
