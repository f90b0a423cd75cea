import { TriageApi } from "./api.js";
import { initApp } from "./app.js";

// ?service=http://host:port overrides the default same-origin-ish base URL
const params = new URLSearchParams(window.location.search);
const baseUrl = params.get("service") ?? "http://127.0.0.1:8000";

const root = document.getElementById("app");
if (root) {
  void initApp(root, new TriageApi(baseUrl));
}
