//! Plain `.xyz` text: a count line, a comment line, then one
//! `symbol x y z` line per atom. Files may hold several frames.

use std::fmt::Write as _;

use super::{Element, Molecule};
use crate::error::{Error, Result};

pub fn parse_xyz(text: &str) -> Result<Vec<Molecule>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut mols = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let count_line = i + 1;
        let n: usize = lines[i].trim().parse().map_err(|_| Error::Parse {
            line: count_line,
            message: format!("expected atom count, found {:?}", lines[i].trim()),
        })?;
        if i + 2 + n > lines.len() {
            return Err(Error::Parse {
                line: count_line,
                message: format!(
                    "frame declares {n} atoms but only {} lines follow the comment",
                    lines.len().saturating_sub(i + 2)
                ),
            });
        }
        let mut mol = Molecule::default();
        for (offset, line) in lines[i + 2..i + 2 + n].iter().enumerate() {
            let line_no = i + 3 + offset;
            let (element, coord) = parse_atom_line(line).map_err(|message| Error::Parse {
                line: line_no,
                message,
            })?;
            mol.push(element, coord);
        }
        mols.push(mol);
        i += 2 + n;
    }
    Ok(mols)
}

fn parse_atom_line(line: &str) -> std::result::Result<(Element, [f64; 3]), String> {
    let mut fields = line.split_whitespace();
    let symbol = fields.next().ok_or("empty atom line")?;
    let element: Element = symbol
        .parse()
        .map_err(|_| format!("unknown element symbol {symbol:?}"))?;
    let mut coord = [0.0; 3];
    for c in &mut coord {
        let field = fields.next().ok_or("expected three coordinates")?;
        // QM9 writes exponents Mathematica-style as `1.5*^-6`.
        let v: f64 = field
            .replace("*^", "e")
            .parse()
            .map_err(|_| format!("non-numeric coordinate {field:?}"))?;
        if !v.is_finite() {
            return Err(format!("non-finite coordinate {field:?}"));
        }
        *c = v;
    }
    Ok((element, coord))
}

/// Serializes frames with six decimal places and empty comment lines.
pub fn write_xyz(mols: &[Molecule]) -> String {
    let mut out = String::new();
    for mol in mols {
        write_frame(&mut out, mol, "");
    }
    out
}

pub fn write_frame(out: &mut String, mol: &Molecule, comment: &str) {
    let _ = writeln!(out, "{}", mol.len());
    let _ = writeln!(out, "{}", comment.replace('\n', " "));
    for (e, p) in mol.elements.iter().zip(&mol.coords) {
        let _ = writeln!(out, "{} {:.6} {:.6} {:.6}", e, p[0], p[1], p[2]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_hydrogen() {
        let mols = parse_xyz("1\n\nH 0 0 0\n").unwrap();
        assert_eq!(mols.len(), 1);
        assert_eq!(mols[0].elements, vec![Element::H]);
        assert_eq!(mols[0].coords, vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn keeps_atom_order() {
        let mols = parse_xyz("2\nc\nC 0 0 0\nO 0 0 1.128\n").unwrap();
        assert_eq!(mols[0].elements, vec![Element::C, Element::O]);
        assert_eq!(mols[0].coords[1], [0.0, 0.0, 1.128]);
    }

    #[test]
    fn count_mismatch_names_count_line() {
        match parse_xyz("3\n\nH 0 0 0\nH 0 0 0") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_xyz("1\n\nH 0 0 0\n2\n\nC 0 0 0\nQq 1 2 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 7, .. }), "{err}");
        let err = parse_xyz("1\n\nH 0 x 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_xyz("one\n\nH 0 0 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn multi_frame_and_qm9_exponents() {
        let text = "1\nfirst\nh 1.0 2.0 3.0\n\n2\nsecond\nC 0 0 1.5*^-3 0.1\nN 0 0 0\n";
        let mols = parse_xyz(text).unwrap();
        assert_eq!(mols.len(), 2);
        assert_eq!(mols[0].elements, vec![Element::H]);
        assert!((mols[1].coords[0][2] - 1.5e-3).abs() < 1e-15);
    }

    #[test]
    fn write_examples() {
        let m = Molecule::new(vec![Element::H], vec![[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(write_xyz(&[m]), "1\n\nH 0.000000 0.000000 0.000000\n");
        assert_eq!(write_xyz(&[]), "");
    }

    fn arb_molecule() -> impl Strategy<Value = Molecule> {
        prop::collection::vec(
            (1u8..=118, prop::array::uniform3(-50.0f64..50.0)),
            0..12,
        )
        .prop_map(|atoms| {
            let (elements, coords) = atoms
                .into_iter()
                .map(|(z, c)| (Element::from_atomic_number(z).unwrap(), c))
                .unzip();
            Molecule { elements, coords }
        })
    }

    proptest! {
        #[test]
        fn write_then_parse_is_identity(mols in prop::collection::vec(arb_molecule(), 0..4)) {
            let parsed = parse_xyz(&write_xyz(&mols)).unwrap();
            prop_assert_eq!(parsed.len(), mols.len());
            for (a, b) in parsed.iter().zip(&mols) {
                prop_assert_eq!(&a.elements, &b.elements);
                for (p, q) in a.coords.iter().flatten().zip(b.coords.iter().flatten()) {
                    prop_assert!((p - q).abs() <= 1e-6);
                }
            }
        }
    }
}
