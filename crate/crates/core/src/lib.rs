pub mod cli;
pub mod construction;
pub mod dimension;
pub mod entropy;
pub mod error;
pub mod group;
pub mod height;
pub mod params;
pub mod sl2;
