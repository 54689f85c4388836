//! Domain datasets: synthetic generation, corpus ingestion, filtering and batching.

pub mod batch;
pub mod dataset;
pub mod filter;
pub mod synthetic;
pub mod vocab;

pub use batch::{Batch, BatchIterator, MixStrategy};
pub use dataset::{load_dataset, read_parallel_text, save_dataset, vocab_from_files, DomainDataset, Pair};
pub use filter::{filter_corpus, FilterSpec, FilterStats};
pub use synthetic::{gen_domain, SyntheticTask, TaskKind};
pub use vocab::Vocab;
