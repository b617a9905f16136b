import { ApiClient } from "./api.js";
import { mountApp } from "./app.js";

const root = document.getElementById("app");
if (root === null) throw new Error("missing #app mount point");

const app = mountApp(root, new ApiClient(""));

// Session id survives reloads in the URL fragment; stale ids are dropped.
const sid = window.location.hash.replace(/^#/, "");
if (sid !== "") {
  void app.resume(sid).then((ok) => {
    if (!ok) window.location.hash = "";
  });
}
