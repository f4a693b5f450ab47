mod dataset;
mod export;
mod image_io;
mod synth;

pub use dataset::{load_dataset, DatasetRoot, Split};
pub use export::{jet, overlay, read_raw_map, write_heatmap, write_overlay, write_raw_map, HEATMAP_SCALE, OVERLAY_ALPHA};
pub use image_io::{read_image, read_mask, write_mask_png, write_png};
pub use synth::{category_name, generate_synthetic, synthesize, DefectKind, SynthSpec};
