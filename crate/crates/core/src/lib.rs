pub mod cmaes;
pub mod codesign;
pub mod dirtran;
pub mod dynamics;
pub mod funnel;
pub mod io;
pub mod nlp;
pub mod tvlqr;
