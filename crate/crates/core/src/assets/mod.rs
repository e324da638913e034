//! ESS device model and load-profile ingestion.

mod ess;
mod profile;

pub use ess::{step_soc, EssError, EssSpec, EssState, Headroom};
pub use profile::{
    load_profiles, parse_profiles, synthetic_profile, write_profiles, LoadProfile, ProfileError,
    SyntheticProfileConfig, PROFILE_VERSION_LINE,
};
