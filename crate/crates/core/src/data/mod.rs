//! CT ingestion, slice-pair packing, augmentation and synthetic datasets.

mod augment;
mod manifest;
mod pairs;
mod resize;
mod synthetic;
mod volume;

pub use augment::{augment, apply_transform, AugmentTransform, MAX_ROTATION_DEG};
pub use manifest::{
    check_disjoint, load_dataset, load_volume_dir, read_label_png, read_image_png, write_dataset,
    DatasetManifest, PairRef, Split, MANIFEST_FILE,
};
pub use pairs::{build_slice_pairs, SlicePair, SliceSource, PAIR_SIZE};
pub use resize::{resize_bilinear, resize_nearest};
pub use synthetic::{
    class_names as synthetic_class_names, generate_synthetic_dataset, synthesize_pairs, synthesize_volumes, SyntheticSpec,
};
pub use volume::{window_normalize, CTVolume, LabelVolume, Window};
pub(crate) use manifest::write_atomic;
