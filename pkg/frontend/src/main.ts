/** Entry point: mount the explorer on #app against the page's own origin. */

import { ExplorerApi } from "./api.js";
import { boot } from "./app.js";

const root = document.getElementById("app");
if (root === null) {
	throw new Error("missing #app mount element");
}
void boot(root, new ExplorerApi());
