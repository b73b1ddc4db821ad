pub mod agent_search;
pub mod config;
pub mod engine;
pub mod ekg;
pub mod entity_linker;
pub mod gateway;
pub mod generation;
pub mod index_store;
pub mod ingestion;
pub mod prompts;
pub mod retrieval;
