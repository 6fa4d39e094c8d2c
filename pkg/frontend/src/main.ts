import { ReviewApi } from "./api.js";
import { mountApp } from "./app.js";
import { ReviewController } from "./model.js";

const params = new URLSearchParams(window.location.search);
const runId = params.get("run") ?? "run1";
const token = params.get("token");

const api = new ReviewApi("", token);
const controller = new ReviewController(api, runId);

const root = document.getElementById("app");
if (!root) throw new Error("missing #app root element");
mountApp(controller, root);
void controller.refresh();
