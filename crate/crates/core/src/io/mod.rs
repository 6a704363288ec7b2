pub mod files;
pub mod float;
pub mod table;

pub use files::{ModelFile, RunConfig, SimFile, Standardization};
pub use table::{load_dataset, read_table, LoadedData, Table};
