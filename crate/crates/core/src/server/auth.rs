use crate::model::ClientId;
use subtle::ConstantTimeEq;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Principal {
    Client(ClientId),
    User,
}

/// Shared-secret tokens, one per principal.
#[derive(Debug, Default, Clone)]
pub struct Authenticator {
    entries: Vec<(Vec<u8>, Principal)>,
}

impl Authenticator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_client(mut self, client: ClientId, token: impl Into<String>) -> Self {
        self.entries.push((token.into().into_bytes(), Principal::Client(client)));
        self
    }

    pub fn with_user(mut self, token: impl Into<String>) -> Self {
        self.entries.push((token.into().into_bytes(), Principal::User));
        self
    }

    pub fn clients(&self) -> impl Iterator<Item = &ClientId> {
        self.entries.iter().filter_map(|(_, p)| match p {
            Principal::Client(c) => Some(c),
            Principal::User => None,
        })
    }

    /// Compares against every entry without short-circuiting on a match.
    pub fn authenticate(&self, token: &str) -> Option<Principal> {
        if token.is_empty() {
            return None;
        }
        let mut found = None;
        for (secret, principal) in &self.entries {
            if bool::from(secret.as_slice().ct_eq(token.as_bytes())) && found.is_none() {
                found = Some(principal.clone());
            }
        }
        found
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_map_to_principals() {
        let a = ClientId::new("a").unwrap();
        let auth = Authenticator::new().with_client(a.clone(), "secret-a").with_user("secret-u");
        assert_eq!(auth.authenticate("secret-a"), Some(Principal::Client(a)));
        assert_eq!(auth.authenticate("secret-u"), Some(Principal::User));
        assert_eq!(auth.authenticate("secret-"), None);
        assert_eq!(auth.authenticate(""), None);
        assert_eq!(auth.authenticate("secret-a\0"), None);
    }
}
