// benchmark-only crate; see benches/pipeline.rs
