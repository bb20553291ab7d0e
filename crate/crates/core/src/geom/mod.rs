//! Molecule representation, `.xyz` I/O, vocabularies, augmentation and
//! sequence packing.

mod element;
mod molecule;
mod pack;
mod toy;
mod vocab;
mod xyz;

pub use element::Element;
pub use molecule::{
    augment, center_molecule, distance, mat_vec, random_rotation, random_translation, Molecule,
    Vec3, IDENTITY, MAX_TRANSLATION,
};
pub use pack::{pack_sequences, PackedBatch};
pub use toy::{toy_corpus, ToyTemplate};
pub use vocab::{TokenId, Vocabulary, BOS_SYMBOL, STOP_SYMBOL};
pub use xyz::{parse_xyz, write_frame, write_xyz};
