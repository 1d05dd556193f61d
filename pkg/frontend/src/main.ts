import { ApiClient } from "./api.js";
import { Controller } from "./controller.js";
import { View } from "./view.js";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app container");

const api = new ApiClient("");
const view = new View(root);
const controller = new Controller(api, { onChange: (state) => view.render(state) });
view.attach(controller);
controller.start();
