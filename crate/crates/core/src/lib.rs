pub mod embedding;
pub mod evaluation;
pub mod experiment;
pub mod http;
pub mod llm;
pub mod mnl;
pub mod retrieval;
pub mod serialization;
pub mod vector_index;
pub mod trip_data;
