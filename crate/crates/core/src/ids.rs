//! String labels for the entities of a scenario.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! label {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

label!(TileId);
label!(ThreadId);
label!(
    /// A set of lockstepped threads replicated across a tile group.
    ThreadGroupId
);
label!(
    /// A set of tiles that checkpoint together.
    GroupId
);
label!(PartitionId);
label!(VariantId);
