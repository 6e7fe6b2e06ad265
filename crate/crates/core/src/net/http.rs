//! JSON HTTP API of the registry.
//!
//! [`Api::handle`] is transport-free and directly testable; [`HttpServer`]
//! binds it to a socket with a small worker pool.

use std::collections::HashMap;
use std::io::{self, Read};
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::server::Node;
use crate::hub::ApiError;
use crate::registry::{hash_password, verify_password, ActivityPatch, NewActivity, Registry, RegistryError};

const MAX_BODY_BYTES: u64 = 64 * 1024;
pub const DEFAULT_WORKERS: usize = 4;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Request {
    pub method: String,
    /// Path plus optional query string.
    pub url: String,
    pub authorization: Option<String>,
    pub body: String,
}

impl Request {
    pub fn new(method: &str, url: &str) -> Self {
        Self {
            method: method.to_owned(),
            url: url.to_owned(),
            ..Self::default()
        }
    }

    pub fn bearer(mut self, token: &str) -> Self {
        self.authorization = Some(format!("Bearer {token}"));
        self
    }

    pub fn json(mut self, body: &Value) -> Self {
        self.body = body.to_string();
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub status: u16,
    pub body: Value,
}

impl Response {
    fn ok<T: Serialize>(status: u16, value: &T) -> Self {
        Self {
            status,
            body: serde_json::to_value(value).expect("response types serialize"),
        }
    }

    fn error(status: u16, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }
}

impl From<ApiError> for Response {
    fn from(e: ApiError) -> Self {
        Response::error(e.status(), e.to_string())
    }
}

impl From<RegistryError> for Response {
    fn from(e: RegistryError) -> Self {
        ApiError::from(e).into()
    }
}

#[derive(Deserialize)]
struct Credentials {
    email: String,
    password: String,
}

#[derive(Deserialize)]
struct AssociateBody {
    device_id: String,
    otp: String,
}

#[derive(Deserialize)]
struct DeviceBody {
    device_id: String,
}

#[derive(Serialize)]
struct UserView<'a> {
    user_id: &'a str,
    email: &'a str,
    role: crate::registry::Role,
}

type Handled = Result<Response, Response>;

fn parse_body<T: DeserializeOwned>(req: &Request) -> Result<T, Response> {
    serde_json::from_str(&req.body).map_err(|e| Response::error(400, format!("bad request body: {e}")))
}

fn parse_query(url: &str) -> (String, HashMap<String, String>) {
    let (path, query) = url.split_once('?').unwrap_or((url, ""));
    let params = url::form_urlencoded::parse(query.as_bytes()).into_owned().collect();
    (path.to_owned(), params)
}

fn number<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> Result<Option<T>, Response> {
    q.get(key)
        .map(|v| v.parse().map_err(|_| Response::error(400, format!("bad {key}"))))
        .transpose()
}

fn required<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> Result<T, Response> {
    number(q, key)?.ok_or_else(|| Response::error(400, format!("missing {key}")))
}

/// The request router over a shared [`Node`].
pub struct Api {
    node: Arc<Node>,
    iterations: u32,
    /// Verified against when the email is unknown, so a failed login costs
    /// the same either way.
    dummy_hash: String,
}

impl std::fmt::Debug for Api {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Api").field("iterations", &self.iterations).finish()
    }
}

impl Api {
    pub fn new(node: Arc<Node>) -> Self {
        let iterations = node.with_hub(|h| h.password_iterations());
        let dummy_hash = hash_password("not a password", iterations, &mut rand::rng());
        Self {
            node,
            iterations,
            dummy_hash,
        }
    }

    pub fn node(&self) -> &Arc<Node> {
        &self.node
    }

    pub fn handle(&self, req: &Request) -> Response {
        match self.route(req) {
            Ok(r) | Err(r) => r,
        }
    }

    fn route(&self, req: &Request) -> Handled {
        let (path, q) = parse_query(&req.url);
        let token = req
            .authorization
            .as_deref()
            .map(|h| h.strip_prefix("Bearer ").unwrap_or("").trim());
        let segments: Vec<&str> = path.trim_matches('/').split('/').collect();
        let m = req.method.as_str();
        let allow = |methods: &[&str]| -> Result<(), Response> {
            if methods.contains(&m) {
                Ok(())
            } else {
                Err(Response::error(405, "method not allowed"))
            }
        };
        match segments.as_slice() {
            ["health"] => {
                allow(&["GET"])?;
                Ok(Response::ok(200, &json!({ "status": "ok" })))
            }
            ["auth", "register"] => {
                allow(&["POST"])?;
                self.register(req)
            }
            ["auth", "login"] => {
                allow(&["POST"])?;
                self.login(req)
            }
            ["activities"] => {
                allow(&["POST"])?;
                let body: NewActivity = parse_body(req)?;
                let a = self.node.with_hub(|h| h.create_activity(token, body))?;
                Ok(Response::ok(201, &a))
            }
            ["activities", "nearby"] => {
                allow(&["GET"])?;
                let lat: f64 = required(&q, "lat")?;
                let lon: f64 = required(&q, "lon")?;
                let radius: f64 = required(&q, "radius")?;
                let list = self.node.with_hub(|h| h.nearby(lat, lon, radius))?;
                Ok(Response::ok(200, &list))
            }
            ["activities", "mine"] => {
                allow(&["GET"])?;
                Ok(Response::ok(200, &self.node.with_hub(|h| h.my_activities(token))?))
            }
            ["activities", id] => {
                allow(&["GET", "PATCH"])?;
                if m == "GET" {
                    Ok(Response::ok(200, &self.node.with_hub(|h| h.activity_detail(token, id))?))
                } else {
                    let patch: ActivityPatch = parse_body(req)?;
                    Ok(Response::ok(200, &self.node.with_hub(|h| h.update_activity(token, id, patch))?))
                }
            }
            ["activities", id, "otp"] => {
                allow(&["POST"])?;
                Ok(Response::ok(201, &self.node.with_hub(|h| h.issue_otp(token, id))?))
            }
            ["activities", id, "occupancy"] => {
                allow(&["GET"])?;
                Ok(Response::ok(200, &self.node.with_hub(|h| h.occupancy_view(token, id))?))
            }
            ["activities", id, "history"] => {
                allow(&["GET"])?;
                let from = number(&q, "from")?.unwrap_or(0);
                let to = number(&q, "to")?.unwrap_or(u64::MAX);
                Ok(Response::ok(200, &self.node.with_hub(|h| h.history(token, id, from, to))?))
            }
            ["activities", id, "devices"] => {
                allow(&["GET"])?;
                Ok(Response::ok(200, &self.node.with_hub(|h| h.activity_devices(token, id))?))
            }
            ["devices", "associate"] => {
                allow(&["POST"])?;
                let b: AssociateBody = parse_body(req)?;
                Ok(Response::ok(200, &self.node.with_hub(|h| h.associate(&b.device_id, &b.otp))?))
            }
            ["devices", "dissociate"] => {
                allow(&["POST"])?;
                let b: DeviceBody = parse_body(req)?;
                Ok(Response::ok(200, &self.node.with_hub(|h| h.dissociate(token, &b.device_id))?))
            }
            ["devices", id, "rotate-key"] => {
                allow(&["POST"])?;
                self.node.with_hub(|h| h.rotate_key(token, id))?;
                Ok(Response::ok(202, &json!({ "device_id": id })))
            }
            _ => Err(Response::error(404, "no such endpoint")),
        }
    }

    fn register(&self, req: &Request) -> Handled {
        let c: Credentials = parse_body(req)?;
        Registry::validate_registration(&c.email, &c.password)?;
        if self.node.with_hub(|h| h.email_taken(&c.email)) {
            return Err(RegistryError::Conflict("email already registered".into()).into());
        }
        // Hashing is slow by design; keep it outside the hub lock.
        let hash = hash_password(&c.password, self.iterations, &mut rand::rng());
        let user = self.node.with_hub(|h| h.add_user(&c.email, hash))?;
        Ok(Response::ok(
            201,
            &UserView {
                user_id: &user.user_id,
                email: &user.email,
                role: user.role,
            },
        ))
    }

    fn login(&self, req: &Request) -> Handled {
        let c: Credentials = parse_body(req)?;
        let found = self.node.with_hub(|h| h.credentials(&c.email));
        let stored = found.as_ref().map_or(self.dummy_hash.as_str(), |(_, h)| h.as_str());
        let ok = verify_password(&c.password, stored);
        match found {
            Some((user_id, _)) if ok => Ok(Response::ok(200, &self.node.with_hub(|h| h.issue_token(&user_id))?)),
            _ => Err(RegistryError::Unauthorized("invalid email or password".into()).into()),
        }
    }
}

/// tiny_http front end for an [`Api`].
pub struct HttpServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for HttpServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpServer").field("addr", &self.addr).finish()
    }
}

impl HttpServer {
    pub fn spawn(api: Arc<Api>, listener: TcpListener, workers: usize) -> io::Result<HttpServer> {
        let addr = listener.local_addr()?;
        let server = tiny_http::Server::from_listener(listener, None).map_err(io::Error::other)?;
        let server = Arc::new(server);
        let workers = (0..workers.max(1))
            .map(|i| {
                let (server, api) = (server.clone(), api.clone());
                thread::Builder::new()
                    .name(format!("http-{i}"))
                    .spawn(move || {
                        for req in server.incoming_requests() {
                            serve_one(&api, req);
                        }
                    })
            })
            .collect::<io::Result<Vec<_>>>()?;
        Ok(HttpServer { server, addr, workers })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.halt();
    }
}

fn header(name: &str, value: &str) -> tiny_http::Header {
    tiny_http::Header::from_bytes(name.as_bytes(), value.as_bytes()).expect("static header is valid")
}

fn serve_one(api: &Api, mut req: tiny_http::Request) {
    let method = req.method().as_str().to_uppercase();
    let mut response = if method == "OPTIONS" {
        Response {
            status: 204,
            body: Value::Null,
        }
    } else {
        let authorization = req
            .headers()
            .iter()
            .find(|h| h.field.equiv("Authorization"))
            .map(|h| h.value.as_str().to_owned());
        let mut body = String::new();
        match req.as_reader().take(MAX_BODY_BYTES).read_to_string(&mut body) {
            Ok(_) => api.handle(&Request {
                method,
                url: req.url().to_owned(),
                authorization,
                body,
            }),
            Err(_) => Response::error(400, "body is not UTF-8"),
        }
    };
    if response.status >= 500 {
        tracing::error!(status = response.status, body = %response.body, "request failed");
    }
    let text = if response.body.is_null() {
        String::new()
    } else {
        std::mem::take(&mut response.body).to_string()
    };
    let out = tiny_http::Response::from_string(text)
        .with_status_code(response.status)
        .with_header(header("Content-Type", "application/json"))
        .with_header(header("Access-Control-Allow-Origin", "*"))
        .with_header(header("Access-Control-Allow-Headers", "Authorization, Content-Type"))
        .with_header(header("Access-Control-Allow-Methods", "GET, POST, PATCH, OPTIONS"));
    let _ = req.respond(out);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SystemClock;
    use crate::hub::{Hub, HubConfig};
    use crate::registry::StubGeocoder;
    use rand::SeedableRng;

    fn api() -> Api {
        let config = HubConfig {
            password_iterations: 1,
            business_emails: vec!["boss@example.com".into()],
            ..HubConfig::default()
        };
        let rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (hub, _) = Hub::open(config, Box::new(StubGeocoder::builtin()), Arc::new(SystemClock), Box::new(rng)).unwrap();
        Api::new(Node::new(hub))
    }

    fn creds(email: &str) -> Value {
        json!({ "email": email, "password": "correct horse" })
    }

    #[test]
    fn register_login_and_errors() {
        let api = api();
        let r = api.handle(&Request::new("POST", "/auth/register").json(&creds("a@example.com")));
        assert_eq!(r.status, 201);
        assert_eq!(r.body["role"], "standard");
        assert!(r.body.get("password_hash").is_none());
        let dup = api.handle(&Request::new("POST", "/auth/register").json(&creds("a@example.com")));
        assert_eq!(dup.status, 409);
        let login = api.handle(&Request::new("POST", "/auth/login").json(&creds("a@example.com")));
        assert_eq!(login.status, 200);
        assert_eq!(login.body["token"].as_str().unwrap().len(), 32);
        let wrong = api.handle(&Request::new("POST", "/auth/login").json(&json!({"email": "a@example.com", "password": "nope nope"})));
        assert_eq!(wrong.status, 401);
        let ghost = api.handle(&Request::new("POST", "/auth/login").json(&creds("ghost@example.com")));
        assert_eq!(ghost.status, 401);
        assert_eq!(api.handle(&Request::new("GET", "/nope")).status, 404);
        assert_eq!(api.handle(&Request::new("DELETE", "/auth/login")).status, 405);
        assert_eq!(api.handle(&Request::new("POST", "/auth/login")).status, 400);
    }

    #[test]
    fn nearby_query_validation() {
        let api = api();
        assert_eq!(api.handle(&Request::new("GET", "/activities/nearby?lat=1&lon=2&radius=10")).status, 200);
        assert_eq!(api.handle(&Request::new("GET", "/activities/nearby?lat=x&lon=2&radius=10")).status, 400);
        assert_eq!(api.handle(&Request::new("GET", "/activities/nearby?lat=91&lon=2&radius=10")).status, 400);
        assert_eq!(api.handle(&Request::new("GET", "/activities/nearby?lat=1&lon=2&radius=0")).status, 400);
    }
}
