pub mod cli;
pub mod container;
pub mod embed_io;
pub mod eval;
pub mod hierarchy;
pub mod manifest;
pub mod model;
pub mod optim;
pub mod pairs;
pub mod probe;
pub mod synth;
pub mod tape;
pub mod text;
pub mod thesaurus;
