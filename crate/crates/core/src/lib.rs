pub mod corpus;
pub mod engine;
pub mod evaluation;
pub mod models;
pub mod seeding;
pub mod special;
pub mod stochastic;
pub mod synthetic;
pub mod training;
