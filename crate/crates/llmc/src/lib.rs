//! File formats, benchmarking sweeps and the `llmc` command line over the
//! pure `llmc-core` compression pipeline. Everything that touches the
//! filesystem or the OS lives here; the core stays `no_std`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod container;
pub mod io;
