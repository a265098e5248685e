import { EngineClient } from "./api.js";
import { SessionController } from "./controller.js";
import { render } from "./view.js";

const params = new URLSearchParams(window.location.search);
const engineUrl = params.get("engine") ?? "http://127.0.0.1:8710";
const root = document.getElementById("app")!;

const controller = new SessionController(new EngineClient(engineUrl));
controller.subscribe((state) => render(root, state, controller));

const existing = params.get("session");
if (existing) {
  void controller.load(existing);
} else {
  render(root, controller.state, controller);
}
