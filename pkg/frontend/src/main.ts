import { setApiBase } from "./api.js";
import { createApp } from "./app.js";

declare global {
  interface Window {
    COSTQ_API?: string;
  }
}

if (window.COSTQ_API) {
  setApiBase(window.COSTQ_API);
}

const root = document.getElementById("app");
if (!root) {
  throw new Error("missing #app mount point");
}
createApp(root);
