// @vitest-environment jsdom
import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { ExplorerApi, keyOf, parseKey, type PointKey } from "../src/api.js";
import { App, createApp } from "../src/app.js";
import { CLASS_COLORS, NEUTRAL } from "../src/color.js";

/** Node's fetch, captured before jsdom globals can shadow it. */
const realFetch: typeof fetch = globalThis.fetch.bind(globalThis);

const PORT = 8600 + (process.pid % 1000);
const BASE = `http://127.0.0.1:${PORT}`;

let workDir: string;
let server: ChildProcess | null = null;
let serverLog = "";

function runCli(args: string[]): void {
	const result = spawnSync("python3", ["-m", "dynaclr.cli", ...args], {
		encoding: "utf8",
		timeout: 240_000,
	});
	if (result.status !== 0) {
		throw new Error(
			`dynaclr ${args[0]} failed (${result.status}):\n${result.stdout}\n${result.stderr}`,
		);
	}
}

async function waitForServer(deadlineMs: number): Promise<void> {
	const deadline = Date.now() + deadlineMs;
	while (Date.now() < deadline) {
		if (server && server.exitCode !== null) {
			throw new Error(`server exited early (${server.exitCode}):\n${serverLog}`);
		}
		try {
			const response = await realFetch(`${BASE}/api/meta`);
			if (response.ok) return;
		} catch {
			// Not listening yet.
		}
		await new Promise((resolve) => setTimeout(resolve, 250));
	}
	throw new Error(`server never came up on ${BASE}:\n${serverLog}`);
}

beforeAll(async () => {
	workDir = mkdtempSync(join(tmpdir(), "explorer-it-"));
	const data = join(workDir, "data");
	const run = join(workDir, "run");
	const emb = join(workDir, "emb");
	runCli(["synth", "--out", data, "--seed", "7", "--fovs", "2", "--cells", "6", "--frames", "10"]);
	runCli([
		"train",
		"--data", data,
		"--out", run,
		"--strategy", "cell-time-aware",
		"--tau", "1",
		"--scale", "desk",
		"--epochs", "1",
		"--seed", "1",
	]);
	runCli(["embed", "--data", data, "--ckpt", join(run, "checkpoint.bin"), "--out", emb]);

	server = spawn(
		"python3",
		["-m", "dynaclr.cli", "serve", "--data", data, "--emb", emb, "--host", "127.0.0.1", "--port", String(PORT)],
		{ stdio: ["ignore", "pipe", "pipe"] },
	);
	server.stdout?.on("data", (chunk) => (serverLog += chunk));
	server.stderr?.on("data", (chunk) => (serverLog += chunk));
	await waitForServer(60_000);
});

afterAll(() => {
	server?.kill("SIGTERM");
	if (workDir) rmSync(workDir, { recursive: true, force: true });
});

/** Vertical-strip lasso polygon containing exactly the n leftmost points on screen. */
function stripAroundLeftmost(app: App, n: number): { polygon: { x: number; y: number }[]; keys: PointKey[] } {
	const placed = app.points.map((p) => {
		const key = keyOf(p.fov_id, p.track_id, p.t);
		const screen = app.scatter.screenOf(key);
		if (!screen) throw new Error(`no screen position for ${key}`);
		return { key, ...screen };
	});
	placed.sort((a, b) => a.x - b.x || a.y - b.y);
	if (placed.length <= n) throw new Error(`only ${placed.length} points placed`);
	const inside = placed.slice(0, n);
	const cut = (inside[n - 1].x + placed[n].x) / 2;
	if (!(inside[n - 1].x < cut && cut < placed[n].x)) {
		throw new Error("screen x tie at the strip boundary");
	}
	const ys = placed.map((p) => p.y);
	const left = Math.min(...placed.map((p) => p.x)) - 10;
	const top = Math.min(...ys) - 10;
	const bottom = Math.max(...ys) + 10;
	return {
		polygon: [
			{ x: left, y: top },
			{ x: cut, y: top },
			{ x: cut, y: bottom },
			{ x: left, y: bottom },
		],
		keys: inside.map((p) => p.key),
	};
}

describe("explorer against a live service", () => {
	it("lasso-annotates 12 points, recolors in place, and keeps playback synchronized", async () => {
		let projectionFetches = 0;
		const countingFetch: typeof fetch = (input, init) => {
			if (String(input).includes("/api/projection")) projectionFetches += 1;
			return realFetch(input, init);
		};
		const api = new ExplorerApi(BASE, countingFetch);
		const app = await createApp(document.body, api);
		expect(app.points.length).toBeGreaterThanOrEqual(12);
		expect(projectionFetches).toBe(1);

		// Lasso exactly 12 points through the scatter's own polygon selection.
		const { polygon, keys } = stripAroundLeftmost(app, 12);
		app.scatter.selectWithPolygon(polygon);
		expect(app.state.selected.size).toBe(12);
		expect([...app.state.selected].sort()).toEqual([...keys].sort());

		// Annotate them and read back through the HTTP API.
		const ok = await app.applyAnnotation("infection", 1);
		expect(ok).toBe(true);
		const stored = await api.annotations({ source: "human" });
		const storedKeys = stored.map((r) => keyOf(r.fov_id, r.track_id, r.t));
		expect(storedKeys).toHaveLength(12);
		expect(storedKeys.sort()).toEqual([...keys].sort());
		for (const record of stored) {
			expect(record.label_type).toBe("infection");
			expect(record.value).toBe(1);
			expect(record.source).toBe("human");
		}

		// Recoloring reflects the new annotations without refetching the projection.
		app.setColorBy("annotation");
		for (const key of keys) {
			expect(app.scatter.colorOf(key)).toBe(CLASS_COLORS[1]);
		}
		const untouched = app.points
			.map((p) => keyOf(p.fov_id, p.track_id, p.t))
			.filter((key) => !app.state.selected.has(key));
		expect(untouched.length).toBeGreaterThan(0);
		for (const key of untouched) {
			expect(app.scatter.colorOf(key)).toBe(NEUTRAL);
		}
		expect(projectionFetches).toBe(1);

		// Track playback: scatter marker and patch image stay on the same frame.
		const { fovId, trackId } = parseKey(keys[0]);
		await app.openTrack(fovId, trackId);
		const detail = await api.track(fovId, trackId);
		expect(detail.embedded_t.length).toBeGreaterThan(0);
		const image = document.querySelector(".patch-image") as HTMLImageElement;
		for (const t of detail.embedded_t.slice(0, 4)) {
			app.tracks.setFrame(t);
			expect(app.state.frame).toBe(t);
			expect(app.scatter.currentKey).toBe(keyOf(fovId, trackId, t));
			expect(image.src).toContain(`/api/patch/${fovId}/${trackId}/${t}?`);
		}

		// The patch the image points at is a real, fetchable resource.
		const patch = await realFetch(image.src);
		expect(patch.status).toBe(200);
		expect(patch.headers.get("content-type")).toContain("image/png");
	}, 300_000);
});
