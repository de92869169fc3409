//! Property-based invariants: interaction tensors keep their exchange and
//! hermiticity symmetries over randomized parameters, and the on-disk
//! formats round-trip bit-exactly.

use nalgebra::Complex;
use proptest::prelude::*;
use subdyn_core::fock::{enumerate_basis, ladder, LadderKind, Statistics};
use subdyn_core::io::{
    read_complex_blob, read_operator, read_tensor, write_complex_blob, write_operator,
    write_tensor,
};
use subdyn_core::modes::{build_box_basis, potential_tensor, Potential};

type Complex64 = Complex<f64>;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn tensor_symmetries_hold(
        strength in 0.05f64..1.0,
        range in 0.05f64..0.5,
        modes in 2usize..5,
        length in 0.5f64..2.0,
    ) {
        let basis = build_box_basis(1, &[length], modes, 1.0).unwrap();
        let gauss = potential_tensor(&basis, &Potential::Gaussian { strength, range }).unwrap();
        prop_assert!(gauss.symmetry_residual() < 1e-9);
        let contact = potential_tensor(
            &basis,
            &Potential::Contact { strength, width: None },
        )
        .unwrap();
        prop_assert!(contact.symmetry_residual() < 1e-9);
    }

    #[test]
    fn complex_blob_round_trips(data in prop::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 0..64)) {
        let dir = tempdir();
        let vals: Vec<Complex64> = data.iter().map(|&(re, im)| Complex64::new(re, im)).collect();
        let path = dir.join("blob.bin");
        write_complex_blob(&path, &vals).unwrap();
        let back = read_complex_blob(&path).unwrap();
        prop_assert_eq!(vals, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn tensor_files_round_trip(strength in 0.05f64..1.0, range in 0.05f64..0.5, modes in 2usize..4) {
        let dir = tempdir();
        let basis = build_box_basis(1, &[1.0], modes, 1.0).unwrap();
        let tensor = potential_tensor(&basis, &Potential::Gaussian { strength, range }).unwrap();
        let header = write_tensor(&dir, "tensor", &basis, &tensor).unwrap();
        let (basis2, tensor2) = read_tensor(&header).unwrap();
        prop_assert_eq!(basis.energies, basis2.energies);
        prop_assert_eq!(tensor.coefficients, tensor2.coefficients);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn operator_files_round_trip(modes in 1usize..4, mode in 0usize..3) {
        let mode = mode.min(modes - 1);
        let dir = tempdir();
        let space = enumerate_basis(Statistics::Fermi, modes, modes, 1).unwrap();
        let op = ladder(&space, mode, LadderKind::Create);
        let header = write_operator(&dir, "ladder", &space, &op).unwrap();
        let (hdr, op2) = read_operator(&header).unwrap();
        prop_assert_eq!(hdr.dim, op.dim);
        prop_assert_eq!(op.sector_shift, op2.sector_shift);
        let diff = op.add(&op2.scaled(Complex64::new(-1.0, 0.0)));
        prop_assert!(diff.max_abs() == 0.0);
        std::fs::remove_dir_all(&dir).ok();
    }
}

fn tempdir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "subdyn-prop-{}-{:x}",
        std::process::id(),
        rand::random::<u64>()
    ));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
